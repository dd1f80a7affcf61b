"""Dataset manifest: one structured text file tracking every sample.

The manifest lives at the root of a dataset directory and references all
per-sample files by relative path.  Large artifacts (fits, label bundles,
review assets) sit beside it; the manifest only records where they are and
what curation status each sample carries.  Updates are atomic
(write-temp-then-rename) so a killed run never leaves a half-written file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from . import container

FORMAT_VERSION = 1

STATUSES = ("unreviewed", "accepted", "rejected")


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    """One dataset entry; all paths are relative to the manifest directory."""

    sample_id: str
    keypoints: str
    silhouette: str | None = None
    image: str | None = None
    gt_parts6: str | None = None
    gt_joints: str | None = None
    predicted_keypoints: str | None = None
    camera: dict | None = None
    fit: str | None = None
    previous_fits: list = field(default_factory=list)
    labels: str | None = None
    status: str = "unreviewed"
    input_hash: str | None = None
    error: str | None = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v not in (None, [])}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ManifestError(f"unknown sample fields: {sorted(extra)}")
        if "sample_id" not in d or "keypoints" not in d:
            raise ManifestError("sample needs at least sample_id and keypoints")
        s = cls(**d)
        if s.status not in STATUSES:
            raise ManifestError(f"bad status {s.status!r} for {s.sample_id!r}")
        return s

    _PATH_FIELDS = ("keypoints", "silhouette", "image", "gt_parts6",
                    "gt_joints", "predicted_keypoints", "fit", "labels")

    def referenced_paths(self):
        for name in self._PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                yield name, value
        for p in self.previous_fits:
            yield "previous_fits", p


@dataclass
class Manifest:
    """Ordered sample collection plus dataset-level defaults."""

    samples: list
    camera: dict | None = None
    model: str | None = None
    path: str | None = None  # set on load; not serialized

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ManifestError(f"duplicate sample ids: {sorted(dupes)}")
        self._by_id = {s.sample_id: s for s in self.samples}

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)

    def get(self, sample_id):
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise ManifestError(f"unknown sample id: {sample_id!r}") from None

    def has(self, sample_id):
        return sample_id in self._by_id

    @property
    def root(self):
        if self.path is None:
            raise ManifestError("manifest has no path; load or save it first")
        return os.path.dirname(os.path.abspath(self.path))

    def resolve(self, relpath):
        return os.path.join(self.root, relpath)

    def relativize(self, abspath):
        return os.path.relpath(os.path.abspath(abspath), self.root)

    def status_counts(self):
        counts = {s: 0 for s in STATUSES}
        for sample in self.samples:
            counts[sample.status] += 1
        return counts

    def to_dict(self):
        d = {"format_version": FORMAT_VERSION,
             "samples": [s.to_dict() for s in self.samples]}
        if self.camera is not None:
            d["camera"] = self.camera
        if self.model is not None:
            d["model"] = self.model
        return d

    def save(self, path=None):
        path = path or self.path
        if path is None:
            raise ManifestError("no path to save the manifest to")
        container.write_json(path, self.to_dict())
        self.path = path


def load_manifest(path, check_files=True):
    data = container.read_json(path)
    if data.get("format_version") != FORMAT_VERSION:
        raise ManifestError(
            f"unsupported manifest version: {data.get('format_version')}")
    samples = [Sample.from_dict(d) for d in data.get("samples", [])]
    m = Manifest(samples=samples, camera=data.get("camera"),
                 model=data.get("model"), path=os.path.abspath(path))
    if check_files:
        missing = []
        for s in samples:
            for fieldname, rel in s.referenced_paths():
                if not os.path.exists(m.resolve(rel)):
                    missing.append(f"{s.sample_id}.{fieldname}: {rel}")
        if m.model is not None and not os.path.exists(m.resolve(m.model)):
            missing.append(f"model: {m.model}")
        if missing:
            raise ManifestError("missing referenced files:\n  "
                                + "\n  ".join(missing))
    return m
