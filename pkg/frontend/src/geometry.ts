// Coordinate math for the case canvas. Corrections are stored in image
// pixel coordinates the moment a drag ends; the canvas is only a view, so
// boxes round-trip through the API pixel-exactly regardless of zoom.

import type { Box } from "./types.js";

/** How the image is fitted into the canvas: uniform scale plus letterbox offsets. */
export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export function fitImage(
  imageW: number,
  imageH: number,
  canvasW: number,
  canvasH: number,
): ViewTransform {
  const scale = Math.min(canvasW / imageW, canvasH / imageH);
  return {
    scale,
    offsetX: (canvasW - imageW * scale) / 2,
    offsetY: (canvasH - imageH * scale) / 2,
  };
}

export function canvasToImage(view: ViewTransform, x: number, y: number): [number, number] {
  return [(x - view.offsetX) / view.scale, (y - view.offsetY) / view.scale];
}

export function imageToCanvas(view: ViewTransform, x: number, y: number): [number, number] {
  return [x * view.scale + view.offsetX, y * view.scale + view.offsetY];
}

/** Order corners so min < max on both axes. */
export function normalizeBox(x1: number, y1: number, x2: number, y2: number): Box {
  return {
    x_min: Math.min(x1, x2),
    y_min: Math.min(y1, y2),
    x_max: Math.max(x1, x2),
    y_max: Math.max(y1, y2),
  };
}

/** Clamp a box to the image; null when nothing meaningful remains. */
export function clampBox(box: Box, imageW: number, imageH: number, minSize = 2): Box | null {
  const clamped = {
    x_min: Math.max(0, Math.min(box.x_min, imageW)),
    y_min: Math.max(0, Math.min(box.y_min, imageH)),
    x_max: Math.max(0, Math.min(box.x_max, imageW)),
    y_max: Math.max(0, Math.min(box.y_max, imageH)),
  };
  if (clamped.x_max - clamped.x_min < minSize || clamped.y_max - clamped.y_min < minSize) {
    return null;
  }
  return clamped;
}

export type DragHandle = "nw" | "ne" | "sw" | "se" | "move";

/** Which part of a box a pointer grabs: a corner handle, the interior, or nothing. */
export function hitTest(box: Box, x: number, y: number, tolerance: number): DragHandle | null {
  const near = (ax: number, ay: number) =>
    Math.abs(x - ax) <= tolerance && Math.abs(y - ay) <= tolerance;
  if (near(box.x_min, box.y_min)) return "nw";
  if (near(box.x_max, box.y_min)) return "ne";
  if (near(box.x_min, box.y_max)) return "sw";
  if (near(box.x_max, box.y_max)) return "se";
  if (x >= box.x_min && x <= box.x_max && y >= box.y_min && y <= box.y_max) return "move";
  return null;
}

/** Apply a drag delta to a box via the grabbed handle. */
export function applyDrag(box: Box, handle: DragHandle, dx: number, dy: number): Box {
  switch (handle) {
    case "move":
      return {
        x_min: box.x_min + dx,
        y_min: box.y_min + dy,
        x_max: box.x_max + dx,
        y_max: box.y_max + dy,
      };
    case "nw":
      return normalizeBox(box.x_min + dx, box.y_min + dy, box.x_max, box.y_max);
    case "ne":
      return normalizeBox(box.x_min, box.y_min + dy, box.x_max + dx, box.y_max);
    case "sw":
      return normalizeBox(box.x_min + dx, box.y_min, box.x_max, box.y_max + dy);
    case "se":
      return normalizeBox(box.x_min, box.y_min, box.x_max + dx, box.y_max + dy);
  }
}
