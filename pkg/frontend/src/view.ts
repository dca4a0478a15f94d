import {
  SessionStatus,
  SessionView,
  postLabel,
} from "./api.js";
import { classColor } from "./palette.js";

export type SubmitFn = (
  clusterId: number,
  label: number,
) => Promise<SessionStatus>;
export type StatusFn = () => Promise<SessionStatus>;

/**
 * The labelling board: one card per prototype, one button per class,
 * digit keys 1..N label the outlined card.
 *
 * All label state lives on the server. A click paints its choice
 * optimistically, sends exactly one POST, and repaints from the previous
 * value if the server refuses; a reload therefore always reproduces the
 * server's view of the session.
 */
export class SessionBoard {
  private labels = new Map<number, number | null>();
  private inFlight = new Set<number>();
  private activeId = -1;
  private status: SessionStatus;
  private toastTimer: number | undefined;

  constructor(
    private root: HTMLElement,
    private view: SessionView,
    private submit: SubmitFn = postLabel,
    private refreshStatus: StatusFn | null = null,
  ) {
    for (const proto of view.prototypes) {
      this.labels.set(proto.cluster_id, proto.label);
    }
    this.status = {
      labelled: view.prototypes.filter((p) => p.label !== null).length,
      total: view.prototypes.length,
    };
  }

  render(): void {
    this.root.textContent = "";
    this.root.appendChild(this.header());

    const grid = document.createElement("div");
    grid.className = "grid";
    for (const proto of this.view.prototypes) {
      grid.appendChild(this.card(proto.cluster_id, proto.frame_png_base64));
    }
    this.root.appendChild(grid);

    const toast = document.createElement("div");
    toast.className = "toast";
    toast.setAttribute("role", "alert");
    toast.hidden = true;
    this.root.appendChild(toast);

    const done = document.createElement("div");
    done.className = "completion";
    done.hidden = true;
    this.root.appendChild(done);

    const firstOpen = this.view.prototypes.find(
      (p) => this.labels.get(p.cluster_id) === null,
    );
    this.setActive(firstOpen ? firstOpen.cluster_id : -1);
    for (const proto of this.view.prototypes) {
      const label = this.labels.get(proto.cluster_id);
      if (label !== null && label !== undefined) {
        this.paintChoice(proto.cluster_id, label);
      }
    }
    this.paintProgress();
    if (this.status.labelled === this.status.total) this.finish();
  }

  handleKey(ev: KeyboardEvent): void {
    if (ev.key < "1" || ev.key > "9") return;
    const classId = Number(ev.key) - 1;
    if (classId >= this.view.classes.length) return;
    if (this.activeId < 0) return;
    void this.choose(this.activeId, classId);
  }

  private header(): HTMLElement {
    const head = document.createElement("header");
    const title = document.createElement("h1");
    title.textContent = "prototype labelling";
    head.appendChild(title);

    const progress = document.createElement("div");
    progress.className = "progress";
    const fill = document.createElement("div");
    fill.className = "progress-fill";
    const text = document.createElement("span");
    text.className = "progress-text";
    progress.appendChild(fill);
    progress.appendChild(text);
    head.appendChild(progress);

    const hint = document.createElement("p");
    hint.className = "hint";
    hint.textContent =
      `click a class, or press 1..${this.view.classes.length} ` +
      "for the outlined card";
    head.appendChild(hint);
    return head;
  }

  private card(clusterId: number, png: string): HTMLElement {
    const fig = document.createElement("figure");
    fig.className = "card";
    fig.dataset.clusterId = String(clusterId);
    fig.addEventListener("click", () => this.setActive(clusterId));

    const img = document.createElement("img");
    img.src = `data:image/png;base64,${png}`;
    img.alt = `prototype ${clusterId}`;
    fig.appendChild(img);

    const caption = document.createElement("figcaption");
    caption.textContent = `cluster ${clusterId}`;
    fig.appendChild(caption);

    const choices = document.createElement("div");
    choices.className = "choices";
    this.view.classes.forEach((name, classId) => {
      const btn = document.createElement("button");
      btn.type = "button";
      btn.textContent = name;
      btn.dataset.classId = String(classId);
      btn.style.setProperty("--class-color", classColor(classId));
      btn.addEventListener("click", (ev) => {
        ev.stopPropagation();
        this.setActive(clusterId);
        void this.choose(clusterId, classId);
      });
      choices.appendChild(btn);
    });
    fig.appendChild(choices);
    return fig;
  }

  private async choose(clusterId: number, classId: number): Promise<void> {
    if (this.status.total > 0 && this.status.labelled === this.status.total) {
      return;
    }
    if (this.inFlight.has(clusterId)) return; // one POST per click, no queue
    const previous = this.labels.get(clusterId);
    if (previous === undefined) return;

    this.inFlight.add(clusterId);
    this.cardOf(clusterId)?.classList.add("busy");
    this.paintChoice(clusterId, classId);
    try {
      const status = await this.submit(clusterId, classId);
      this.labels.set(clusterId, classId);
      this.status = status;
      this.paintProgress();
      if (status.labelled === status.total) {
        this.finish();
      } else {
        this.advanceActive(clusterId);
        await this.resync();
      }
    } catch (err) {
      this.paintChoice(clusterId, previous);
      this.showToast((err as Error).message);
    } finally {
      this.inFlight.delete(clusterId);
      this.cardOf(clusterId)?.classList.remove("busy");
    }
  }

  /** The session file is the ground truth; after a write, read the counter
      back instead of trusting local arithmetic. Skipped once complete: the
      service exits right after the last label. */
  private async resync(): Promise<void> {
    if (this.refreshStatus === null) return;
    try {
      this.status = await this.refreshStatus();
      this.paintProgress();
    } catch (err) {
      console.error("status refresh failed", err);
    }
  }

  private cardOf(clusterId: number): HTMLElement | null {
    return this.root.querySelector(
      `.card[data-cluster-id="${clusterId}"]`,
    );
  }

  private setActive(clusterId: number): void {
    this.activeId = clusterId;
    for (const card of this.root.querySelectorAll(".card")) {
      card.classList.toggle(
        "active",
        card instanceof HTMLElement &&
          card.dataset.clusterId === String(clusterId),
      );
    }
  }

  private advanceActive(justLabelled: number): void {
    const open = this.view.prototypes.filter(
      (p) => this.labels.get(p.cluster_id) === null,
    );
    if (open.length === 0) return;
    const after = open.find((p) => p.cluster_id > justLabelled);
    this.setActive((after ?? open[0]).cluster_id);
  }

  private paintChoice(clusterId: number, classId: number | null): void {
    const card = this.cardOf(clusterId);
    if (!card) return;
    for (const btn of card.querySelectorAll("button")) {
      btn.classList.toggle(
        "selected",
        classId !== null && btn.dataset.classId === String(classId),
      );
    }
  }

  private paintProgress(): void {
    const { labelled, total } = this.status;
    const text = this.root.querySelector(".progress-text");
    if (text) text.textContent = `${labelled} / ${total} labelled`;
    const fill = this.root.querySelector<HTMLElement>(".progress-fill");
    if (fill) {
      fill.style.width = total > 0 ? `${(100 * labelled) / total}%` : "100%";
    }
  }

  private finish(): void {
    const grid = this.root.querySelector<HTMLElement>(".grid");
    if (grid) grid.hidden = true;
    const done = this.root.querySelector<HTMLElement>(".completion");
    if (done) {
      done.textContent =
        this.status.total === 0
          ? "nothing to label in this session"
          : `session complete, all ${this.status.total} prototypes labelled`;
      done.hidden = false;
    }
    this.setActive(-1);
  }

  private showToast(message: string): void {
    const toast = this.root.querySelector<HTMLElement>(".toast");
    if (!toast) return;
    toast.textContent = message;
    toast.hidden = false;
    if (this.toastTimer !== undefined) clearTimeout(this.toastTimer);
    this.toastTimer = setTimeout(() => {
      toast.hidden = true;
    }, 4000) as unknown as number;
  }
}
