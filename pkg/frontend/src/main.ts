import { ReviewApp } from "./app.js";

const root = document.getElementById("app");
if (root instanceof HTMLElement) {
  const params = new URLSearchParams(window.location.search);
  const app = new ReviewApp(root, {
    annotator: params.get("annotator") ?? "reviewer",
    // same origin by default; ?service=http://host:port targets a remote one
    baseUrl: params.get("service") ?? "",
  });
  void app.start();
}
