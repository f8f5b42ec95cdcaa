import { CalibApp } from "./app";
import "./style.css";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app element");
}

const params = new URLSearchParams(window.location.search);
const app = new CalibApp(root, {
  baseUrl: params.get("service") ?? "",
});

const sessionId = params.get("session");
void (sessionId ? app.resume(sessionId).then(() => app.start()) : app.start());
