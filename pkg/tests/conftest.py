"""Shared fixtures: the mini body model, a default camera, synthetic datasets.

The dataset builder mirrors the CLI's expected layout (keypoint files, 6-part
ground-truth masks, ground-truth joints, manifest) so pipeline and service
tests can run end to end on purely synthetic inputs.
"""

import os
import shutil

import numpy as np
import pytest
from click.testing import CliRunner

from upfit import body_model, container, labelgen, render
from upfit.cli import main as cli_main
from upfit.fitting import FitResult, KeypointSet2D, save_keypoints
from upfit.manifest import Manifest, Sample


@pytest.fixture(scope="session")
def model():
    return body_model.make_mini_model()


@pytest.fixture(scope="session")
def camera():
    return render.Camera(focal=500.0, principal_point=(250.0, 250.0),
                         image_size=(500, 500))


def synth_person(model, seed, distance=2.0, pose_sigma=0.12, shape_sigma=0.6,
                 trans_sigma=0.05):
    """One jittered frontal person; returns (pose, shape, translation, rng)."""
    rng = np.random.default_rng(seed)
    pose, trans = body_model.frontal_pose(model, distance)
    pose = pose.copy()
    pose[1:] += rng.normal(0, pose_sigma, size=pose[1:].shape)
    beta = rng.normal(0, shape_sigma, size=model.num_shapes)
    trans = np.asarray(trans, dtype=float) + rng.normal(0, trans_sigma, size=3)
    return pose, beta, trans, rng


def build_dataset(root, model, cam, n=10, kp_noise=1.0, corrupt_last=False):
    """Write a synthetic dataset under ``root`` and return its manifest."""
    os.makedirs(os.path.join(root, "kp"), exist_ok=True)
    os.makedirs(os.path.join(root, "gt"), exist_ok=True)
    body_model.save_model(os.path.join(root, "model.npz"), model)
    samples = []
    for s in range(n):
        pose, beta, trans, rng = synth_person(model, 100 + s)
        posed = body_model.pose_mesh(model, pose, beta, trans)
        uv = render.project(body_model.model_keypoints3d(model, posed, "mini18"), cam)
        uv = uv + rng.normal(0, kp_noise, size=uv.shape)
        kp = KeypointSet2D(set_name="mini18", points=uv,
                           confidence=np.ones(len(uv)))
        save_keypoints(os.path.join(root, "kp", f"s{s}.txt"), kp)
        true_fit = FitResult(pose=pose, shape=beta, translation=trans,
                             energies={}, iterations=0, converged=True)
        bundle = labelgen.generate_labels(model, true_fit, cam)
        render.save_mask(os.path.join(root, "gt", f"s{s}_parts6.png"),
                         bundle.reduced_mask)
        container.write_json(os.path.join(root, "gt", f"s{s}_joints.json"),
                             {"joints": posed.joints3d.tolist()})
        samples.append(Sample(sample_id=f"s{s}", keypoints=f"kp/s{s}.txt",
                              gt_parts6=f"gt/s{s}_parts6.png",
                              gt_joints=f"gt/s{s}_joints.json"))
    if corrupt_last:
        with open(os.path.join(root, "kp", f"s{n - 1}.txt"), "w") as fh:
            fh.write("not a keypoint file\n")
    man = Manifest(samples=samples, camera=cam.to_dict(), model="model.npz",
                   path=os.path.join(root, "manifest.json"))
    man.save()
    return man


@pytest.fixture(scope="session")
def fitted_dataset(model, camera, tmp_path_factory):
    """A 10-sample dataset with every sample fitted, built once per session."""
    root = tmp_path_factory.mktemp("fitted_ds")
    build_dataset(str(root), model, camera, n=10)
    runner = CliRunner()
    res = runner.invoke(cli_main, ["fit", "--manifest",
                                   str(root / "manifest.json"), "--jobs", "1"])
    assert res.exit_code == 0, res.output
    return str(root)


@pytest.fixture
def dataset_copy(fitted_dataset, tmp_path):
    """Private mutable copy of the fitted dataset."""
    dst = os.path.join(str(tmp_path), "ds")
    shutil.copytree(fitted_dataset, dst)
    return dst
