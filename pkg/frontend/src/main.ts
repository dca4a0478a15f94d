import { fetchSession, fetchStatus, postLabel } from "./api.js";
import { SessionBoard } from "./view.js";

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  try {
    const view = await fetchSession();
    const board = new SessionBoard(root, view, postLabel, fetchStatus);
    board.render();
    window.addEventListener("keydown", (ev) => board.handleKey(ev));
  } catch (err) {
    const panel = document.createElement("p");
    panel.className = "load-error";
    panel.textContent =
      `could not load the labelling session: ${(err as Error).message}`;
    root.textContent = "";
    root.appendChild(panel);
    console.error(err);
  }
}

void boot();
