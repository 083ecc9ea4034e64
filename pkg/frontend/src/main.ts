/**
 * DOM wiring for the annotation client: image upload, click-to-segment
 * canvas, granularity slider, undo/reset, and error toasts.
 *
 * Left click places a positive click, right click (or alt+click) a
 * negative one. The slider is continuous in the UI and snapped to the
 * server's granularity bins on send; the active bin is displayed.
 */

import { ApiClient } from "./api.js";
import { AnnotationSession, snapToBins } from "./session.js";
import { debounce } from "./debounce.js";
import { overlayBytes, canvasToPixel, POSITIVE_COLOR, NEGATIVE_COLOR } from "./overlay.js";

const SLIDER_DEBOUNCE_MS = 150;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function toast(message: string): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = message;
  box.style.opacity = "1";
  setTimeout(() => {
    box.style.opacity = "0";
  }, 2500);
}

async function fileToBase64(file: File): Promise<string> {
  const buf = await file.arrayBuffer();
  let binary = "";
  const bytes = new Uint8Array(buf);
  for (let i = 0; i < bytes.length; i++) binary += String.fromCharCode(bytes[i]);
  return btoa(binary);
}

export function setup(): void {
  const baseUrl = (window as { GRAINSEG_API?: string }).GRAINSEG_API ?? "";
  const session = new AnnotationSession(new ApiClient(baseUrl));

  const canvas = el<HTMLCanvasElement>("canvas");
  const ctx = canvas.getContext("2d")!;
  const fileInput = el<HTMLInputElement>("file");
  const slider = el<HTMLInputElement>("granularity");
  const sliderLabel = el<HTMLSpanElement>("granularity-label");
  const undoButton = el<HTMLButtonElement>("undo");
  const resetButton = el<HTMLButtonElement>("reset");
  const downloadButton = el<HTMLButtonElement>("download");

  let bitmap: ImageBitmap | null = null;

  function redraw(): void {
    if (!bitmap) return;
    canvas.width = session.w;
    canvas.height = session.h;
    ctx.drawImage(bitmap, 0, 0, session.w, session.h);
    if (session.mask) {
      const overlay = ctx.createImageData(session.w, session.h);
      overlay.data.set(overlayBytes(session.mask, session.h, session.w));
      void createImageBitmap(overlay).then((img) => {
        ctx.drawImage(img, 0, 0);
        drawMarkers();
      });
    } else {
      drawMarkers();
    }
    undoButton.disabled = !session.canUndo;
    const snapped = snapToBins(Number(slider.value));
    sliderLabel.textContent = `${slider.value} (bin ${snapped.toFixed(1)})`;
  }

  function drawMarkers(): void {
    for (const marker of session.markers) {
      ctx.beginPath();
      ctx.arc(marker.col + 0.5, marker.row + 0.5, 3, 0, 2 * Math.PI);
      ctx.fillStyle = marker.polarity === "positive" ? POSITIVE_COLOR : NEGATIVE_COLOR;
      ctx.fill();
      ctx.strokeStyle = "white";
      ctx.stroke();
    }
  }

  session.onUpdate = redraw;
  session.onError = (code, message) => toast(`${code}: ${message}`);

  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    bitmap = await createImageBitmap(file);
    await session.start(await fileToBase64(file));
    redraw();
  });

  canvas.addEventListener("click", (event) => {
    const rect = canvas.getBoundingClientRect();
    const { row, col } = canvasToPixel(
      event.clientX - rect.left, event.clientY - rect.top,
      rect.width, rect.height, session.w, session.h,
    );
    void session.click(row, col, event.altKey ? "negative" : "positive");
  });

  canvas.addEventListener("contextmenu", (event) => {
    event.preventDefault();
    const rect = canvas.getBoundingClientRect();
    const { row, col } = canvasToPixel(
      event.clientX - rect.left, event.clientY - rect.top,
      rect.width, rect.height, session.w, session.h,
    );
    void session.click(row, col, "negative");
  });

  const sendGranularity = debounce((value: number) => {
    void session.setGranularity(value);
  }, SLIDER_DEBOUNCE_MS);

  slider.addEventListener("input", () => {
    const snapped = snapToBins(Number(slider.value));
    sliderLabel.textContent = `${slider.value} (bin ${snapped.toFixed(1)})`;
    sendGranularity(Number(slider.value));
  });

  undoButton.addEventListener("click", () => void session.undo());
  resetButton.addEventListener("click", () => void session.reset());

  downloadButton.addEventListener("click", () => {
    if (!session.mask) return;
    const scratch = document.createElement("canvas");
    scratch.width = session.w;
    scratch.height = session.h;
    const scratchCtx = scratch.getContext("2d")!;
    const data = scratchCtx.createImageData(session.w, session.h);
    for (let i = 0; i < session.mask.length; i++) {
      const v = session.mask[i] ? 255 : 0;
      data.data[i * 4] = data.data[i * 4 + 1] = data.data[i * 4 + 2] = v;
      data.data[i * 4 + 3] = 255;
    }
    scratchCtx.putImageData(data, 0, 0);
    const link = document.createElement("a");
    link.download = "mask.png";
    link.href = scratch.toDataURL("image/png");
    link.click();
  });
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", setup);
}
