import { ApiClient } from "./api";
import { initApp } from "./app";
import "./style.css";

const root = document.getElementById("app");
if (root) {
  initApp(root, new ApiClient(""));
}
