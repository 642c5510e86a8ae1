// App bootstrap: wire the store, the canvas, the queue list, and the
// keyboard shortcuts (p = pass, f = fail, n = next) to the DOM shell in
// index.html.

import { ApiClient } from "./api.js";
import { CaseCanvas } from "./canvas.js";
import { ReviewStore } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const session = (await (await fetch("/api/session")).json()) as { run_id: string };
  const api = new ApiClient(session.run_id);
  const store = new ReviewStore(api);
  const canvas = new CaseCanvas(el<HTMLCanvasElement>("case-canvas"));
  canvas.onDraftsChanged = (drafts) => {
    store.drafts = drafts;
    render();
  };

  const render = () => {
    el("run-title").textContent = `run ${session.run_id}`;
    const s = store.stats;
    el("stats").textContent =
      `${s.pending} pending · ${s.passed} passed · ${s.failed} failed / ${s.total}`;

    const queue = el("queue");
    queue.replaceChildren(
      ...store.queue.map((summary) => {
        const item = document.createElement("li");
        item.textContent = summary.scenario;
        item.className = summary.id === store.current?.id ? "active" : "";
        item.onclick = () => void store.openCase(summary.id);
        return item;
      }),
    );

    const banner = el("banner");
    banner.textContent = store.banner?.text ?? "";
    banner.className = store.banner ? `banner ${store.banner.kind}` : "banner hidden";

    const current = store.current;
    el("case-panel").style.display = current ? "" : "none";
    if (!current) return;
    el("scenario").textContent = current.scenario.text;
    el("case-meta").textContent =
      `${current.id} · ${current.state} · revision ${current.revision}` +
      ` · image ${store.imageIndex + 1}/${current.image_ids.length}`;

    const imageId = store.currentImageId();
    const image = current.images.find((i) => i.image_id === imageId);
    if (image && imageId) {
      canvas.show(
        imageId,
        image.url,
        image.width ?? 640,
        image.height ?? 480,
        current.predictions[imageId] ?? [],
        store.drafts,
        current.category_id ?? 0,
      );
    }

    el("drafts").replaceChildren(
      ...store.drafts.map((draft, index) => {
        const row = document.createElement("li");
        const b = draft.box;
        row.textContent =
          `${draft.imageId} [${b.x_min.toFixed(0)}, ${b.y_min.toFixed(0)}, ` +
          `${b.x_max.toFixed(0)}, ${b.y_max.toFixed(0)}]`;
        const remove = document.createElement("button");
        remove.textContent = "x";
        remove.onclick = () => store.removeDraft(index);
        row.appendChild(remove);
        return row;
      }),
    );
    (el<HTMLButtonElement>("btn-pass")).disabled = store.busy || current.state === "passed";
    (el<HTMLButtonElement>("btn-fail")).disabled = store.busy || current.state === "passed";
  };

  store.subscribe(render);
  el("btn-pass").onclick = () => void store.submit("passed");
  el("btn-fail").onclick = () => void store.submit("failed");
  el("btn-next").onclick = () => void store.openNext();
  el("btn-prev-image").onclick = () => {
    if (store.current && store.imageIndex > 0) {
      store.imageIndex -= 1;
      render();
    }
  };
  el("btn-next-image").onclick = () => {
    if (store.current && store.imageIndex < store.current.image_ids.length - 1) {
      store.imageIndex += 1;
      render();
    }
  };

  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement) return;
    if (event.key === "p") void store.submit("passed");
    else if (event.key === "f") void store.submit("failed");
    else if (event.key === "n") void store.openNext();
  });

  await store.refresh();
  await store.openNext();
  render();
}

void boot();
