/** Browser entry point: judge token comes from the ?judge= query parameter. */
import { ApiClient } from "./api.js";
import { LabelingApp } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
const judge = new URLSearchParams(window.location.search).get("judge");
if (!judge) {
  root.textContent = "Add ?judge=<your-token> to the URL to start judging.";
} else {
  const app = new LabelingApp({ judge, client: new ApiClient(""), root });
  void app.start();
}
