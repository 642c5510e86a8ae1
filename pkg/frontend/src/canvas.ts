// Canvas overlay: the served raster stretched to fit, predicted boxes in
// solid strokes, draft corrections dashed with corner handles. Pointer
// drags are converted to image coordinates immediately; the canvas never
// stores geometry of its own.

import {
  applyDrag,
  canvasToImage,
  clampBox,
  fitImage,
  hitTest,
  normalizeBox,
  type DragHandle,
  type ViewTransform,
} from "./geometry.js";
import type { Box, DraftBox, Prediction } from "./types.js";

const HANDLE_PX = 7;

interface DragState {
  kind: "new" | "edit";
  draftIndex: number;
  handle: DragHandle;
  startX: number;
  startY: number;
  originalBox: Box;
}

export class CaseCanvas {
  private image: HTMLImageElement | null = null;
  private imageW = 1;
  private imageH = 1;
  private imageId: string | null = null;
  private predictions: Prediction[] = [];
  private drafts: DraftBox[] = [];
  private category = 0;
  private drag: DragState | null = null;
  private view: ViewTransform = { scale: 1, offsetX: 0, offsetY: 0 };

  onDraftsChanged: (drafts: DraftBox[]) => void = () => {};

  constructor(private readonly canvas: HTMLCanvasElement) {
    canvas.addEventListener("pointerdown", (e) => this.pointerDown(e));
    canvas.addEventListener("pointermove", (e) => this.pointerMove(e));
    canvas.addEventListener("pointerup", (e) => this.pointerUp(e));
  }

  show(
    imageId: string,
    url: string,
    imageW: number,
    imageH: number,
    predictions: Prediction[],
    drafts: DraftBox[],
    category: number,
  ): void {
    this.imageId = imageId;
    this.imageW = imageW;
    this.imageH = imageH;
    this.predictions = predictions;
    this.drafts = drafts;
    this.category = category;
    if (!this.image || this.image.dataset.url !== url) {
      const img = new Image();
      img.dataset.url = url;
      img.onload = () => this.render();
      img.src = url;
      this.image = img;
    }
    this.render();
  }

  setDrafts(drafts: DraftBox[]): void {
    this.drafts = drafts;
    this.render();
  }

  private myDrafts(): DraftBox[] {
    return this.drafts.filter((d) => d.imageId === this.imageId);
  }

  private pointerToImage(event: PointerEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    const cx = ((event.clientX - rect.left) / rect.width) * this.canvas.width;
    const cy = ((event.clientY - rect.top) / rect.height) * this.canvas.height;
    return canvasToImage(this.view, cx, cy);
  }

  private pointerDown(event: PointerEvent): void {
    if (!this.imageId) return;
    this.canvas.setPointerCapture(event.pointerId);
    const [x, y] = this.pointerToImage(event);
    const tolerance = HANDLE_PX / this.view.scale;
    const mine = this.myDrafts();
    for (let i = mine.length - 1; i >= 0; i--) {
      const draft = mine[i]!;
      const handle = hitTest(draft.box, x, y, tolerance);
      if (handle) {
        this.drag = {
          kind: "edit",
          draftIndex: this.drafts.indexOf(draft),
          handle,
          startX: x,
          startY: y,
          originalBox: { ...draft.box },
        };
        return;
      }
    }
    const box = normalizeBox(x, y, x + 1, y + 1);
    this.drafts = [...this.drafts, { imageId: this.imageId, box, category: this.category }];
    this.drag = {
      kind: "new",
      draftIndex: this.drafts.length - 1,
      handle: "se",
      startX: x,
      startY: y,
      originalBox: box,
    };
    this.render();
  }

  private pointerMove(event: PointerEvent): void {
    if (!this.drag) return;
    const [x, y] = this.pointerToImage(event);
    const dx = x - this.drag.startX;
    const dy = y - this.drag.startY;
    const draft = this.drafts[this.drag.draftIndex];
    if (!draft) return;
    const moved =
      this.drag.kind === "new"
        ? normalizeBox(this.drag.startX, this.drag.startY, x, y)
        : applyDrag(this.drag.originalBox, this.drag.handle, dx, dy);
    this.drafts = this.drafts.map((d, i) =>
      i === this.drag!.draftIndex ? { ...d, box: moved } : d,
    );
    this.render();
  }

  private pointerUp(event: PointerEvent): void {
    if (!this.drag) return;
    const index = this.drag.draftIndex;
    this.drag = null;
    const draft = this.drafts[index];
    if (draft) {
      const clamped = clampBox(draft.box, this.imageW, this.imageH);
      this.drafts = clamped
        ? this.drafts.map((d, i) => (i === index ? { ...d, box: clamped } : d))
        : this.drafts.filter((_, i) => i !== index);
    }
    this.canvas.releasePointerCapture(event.pointerId);
    this.onDraftsChanged(this.drafts);
    this.render();
  }

  render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#101418";
    ctx.fillRect(0, 0, width, height);
    this.view = fitImage(this.imageW, this.imageH, width, height);
    if (this.image?.complete) {
      ctx.drawImage(
        this.image,
        this.view.offsetX,
        this.view.offsetY,
        this.imageW * this.view.scale,
        this.imageH * this.view.scale,
      );
    }
    for (const prediction of this.predictions) {
      this.strokeBox(ctx, prediction.box, "#4cc2ff", false);
      this.label(ctx, prediction.box, `${prediction.category} ${(prediction.score * 100).toFixed(0)}%`);
    }
    for (const draft of this.myDrafts()) {
      this.strokeBox(ctx, draft.box, "#ffd24c", true);
    }
  }

  private strokeBox(ctx: CanvasRenderingContext2D, box: Box, color: string, dashed: boolean): void {
    const [x1, y1] = [
      box.x_min * this.view.scale + this.view.offsetX,
      box.y_min * this.view.scale + this.view.offsetY,
    ];
    const w = (box.x_max - box.x_min) * this.view.scale;
    const h = (box.y_max - box.y_min) * this.view.scale;
    ctx.save();
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    if (dashed) ctx.setLineDash([6, 4]);
    ctx.strokeRect(x1, y1, w, h);
    if (dashed) {
      ctx.setLineDash([]);
      ctx.fillStyle = color;
      for (const [hx, hy] of [
        [x1, y1],
        [x1 + w, y1],
        [x1, y1 + h],
        [x1 + w, y1 + h],
      ]) {
        ctx.fillRect(hx! - 3, hy! - 3, 6, 6);
      }
    }
    ctx.restore();
  }

  private label(ctx: CanvasRenderingContext2D, box: Box, text: string): void {
    const x = box.x_min * this.view.scale + this.view.offsetX;
    const y = box.y_min * this.view.scale + this.view.offsetY;
    ctx.save();
    ctx.font = "11px system-ui, sans-serif";
    const pad = 3;
    const metrics = ctx.measureText(text);
    ctx.fillStyle = "rgba(16, 20, 24, 0.8)";
    ctx.fillRect(x, y - 14, metrics.width + pad * 2, 14);
    ctx.fillStyle = "#4cc2ff";
    ctx.fillText(text, x + pad, y - 4);
    ctx.restore();
  }
}
