import { ApiClient } from "./api.js";
import { createViewer } from "./viewer.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");

createViewer(root, new ApiClient(window.location.origin)).catch((err) => {
  root.textContent = `failed to start viewer: ${err}`;
});
