import { ServiceClient } from './api.js';
import { dragToDraft, hitHandle, normalize } from './boxes.js';
import type { Handle } from './boxes.js';
import { AnnotatorController } from './controller.js';
import { drawScene, statusLine } from './render.js';
import type { Box } from './types.js';
import { canvasToImage, fitView, panBy, zoomAt } from './view.js';
import type { ViewTransform } from './view.js';

const HANDLE_TOL_PX = 7; // canvas pixels; divided by zoom for image-space tests
const ZOOM_MIN = 0.1;
const ZOOM_MAX = 16;

function must<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing #${id}`);
  return el as T;
}

function serviceBase(): string {
  const param = new URLSearchParams(window.location.search).get('service');
  return param ?? 'http://127.0.0.1:8321';
}

function main() {
  const canvas = must<HTMLCanvasElement>('canvas');
  const ctx = canvas.getContext('2d');
  if (ctx === null) throw new Error('no 2d context');
  const status = must<HTMLElement>('status');
  const toast = must<HTMLElement>('toast');
  const toastText = must<HTMLElement>('toast-text');
  const retryBtn = must<HTMLButtonElement>('retry');
  const dismissBtn = must<HTMLButtonElement>('dismiss');
  const classInput = must<HTMLInputElement>('class-tag');
  const autoRefine = must<HTMLInputElement>('auto-refine');
  const acceptBtn = must<HTMLButtonElement>('accept');
  const rejectBtn = must<HTMLButtonElement>('reject');
  const refineBtn = must<HTMLButtonElement>('refine');
  const clearBtn = must<HTMLButtonElement>('clear');
  const prevBtn = must<HTMLButtonElement>('prev');
  const nextBtn = must<HTMLButtonElement>('next');
  const labelList = must<HTMLUListElement>('labels');

  const client = new ServiceClient(serviceBase());
  const controller = new AnnotatorController(client);

  let view: ViewTransform = { zoom: 1, panX: 0, panY: 0 };
  let imageEl: HTMLImageElement | null = null;
  let loadedImageId: string | null = null;
  let rubberBand: Box | null = null;

  // pointer gesture bookkeeping
  let dragStart: [number, number] | null = null;
  let grabbed: Handle | null = null;
  let panning: [number, number] | null = null;

  function sizeCanvas() {
    const rect = canvas.getBoundingClientRect();
    canvas.width = Math.max(1, Math.round(rect.width));
    canvas.height = Math.max(1, Math.round(rect.height));
  }

  function repaint() {
    const image = controller.currentImage();
    drawScene(ctx!, {
      state: controller.state,
      view,
      image: imageEl,
      imageWidth: image?.width ?? 0,
      imageHeight: image?.height ?? 0,
      rubberBand,
    });
    status.textContent = statusLine(controller.state);
    const s = controller.state;
    toast.style.display = s.error === null ? 'none' : 'flex';
    toastText.textContent = s.error ?? '';
    retryBtn.style.display = s.canRetry ? 'inline-block' : 'none';
    acceptBtn.disabled = s.proposal === null;
    rejectBtn.disabled = s.proposal === null;
    refineBtn.disabled = s.draft === null || s.refinePending;
    clearBtn.disabled = s.draft === null && s.proposal === null;
    renderLabelList();
  }

  function renderLabelList() {
    labelList.textContent = '';
    for (const label of controller.state.committed) {
      const li = document.createElement('li');
      const text = document.createElement('span');
      const [x1, y1, x2, y2] = label.box;
      text.textContent =
        `${label.class} [${x1.toFixed(1)}, ${y1.toFixed(1)}, `
        + `${x2.toFixed(1)}, ${y2.toFixed(1)}] (${label.source})`;
      const del = document.createElement('button');
      del.textContent = 'x';
      del.title = 'delete label';
      del.addEventListener('click', () => {
        void controller.deleteLabel(label.id).catch(showError);
      });
      li.append(text, del);
      labelList.append(li);
    }
  }

  function showError(err: unknown) {
    toast.style.display = 'flex';
    toastText.textContent = err instanceof Error ? err.message : String(err);
    retryBtn.style.display = 'none';
  }

  function loadImageBitmap(id: string) {
    const el = new Image();
    el.onload = () => {
      imageEl = el;
      loadedImageId = id;
      sizeCanvas();
      view = fitView(el.naturalWidth, el.naturalHeight, canvas.width, canvas.height);
      repaint();
    };
    el.onerror = () => showError(new Error(`could not load image ${id}`));
    el.src = client.imageUrl(id);
  }

  function canvasPoint(ev: PointerEvent | WheelEvent): [number, number] {
    const rect = canvas.getBoundingClientRect();
    return [ev.clientX - rect.left, ev.clientY - rect.top];
  }

  canvas.addEventListener('pointerdown', (ev) => {
    if (controller.state.image === null) return;
    canvas.setPointerCapture(ev.pointerId);
    const [cx, cy] = canvasPoint(ev);
    if (ev.button === 1) {
      panning = [cx, cy];
      return;
    }
    const proposal = controller.state.proposal;
    if (proposal !== null) {
      const [ix, iy] = canvasToImage(view, cx, cy);
      const handle = hitHandle(proposal, ix, iy, HANDLE_TOL_PX / view.zoom);
      if (handle !== null) {
        grabbed = handle;
        dragStart = [cx, cy];
        return;
      }
    }
    dragStart = [cx, cy];
    rubberBand = null;
    controller.beginDraft();
    repaint();
  });

  canvas.addEventListener('pointermove', (ev) => {
    const [cx, cy] = canvasPoint(ev);
    if (panning !== null) {
      view = panBy(view, cx - panning[0], cy - panning[1]);
      panning = [cx, cy];
      repaint();
      return;
    }
    if (dragStart === null) return;
    if (grabbed !== null) {
      const [px, py] = canvasToImage(view, dragStart[0], dragStart[1]);
      const [ix, iy] = canvasToImage(view, cx, cy);
      controller.adjustProposal(grabbed, ix - px, iy - py);
      dragStart = [cx, cy];
      return;
    }
    const [ix0, iy0] = canvasToImage(view, dragStart[0], dragStart[1]);
    const [ix1, iy1] = canvasToImage(view, cx, cy);
    rubberBand = normalize(ix0, iy0, ix1, iy1);
    repaint();
  });

  canvas.addEventListener('pointerup', (ev) => {
    canvas.releasePointerCapture(ev.pointerId);
    if (panning !== null) {
      panning = null;
      return;
    }
    if (dragStart === null) return;
    const start = dragStart;
    dragStart = null;
    if (grabbed !== null) {
      grabbed = null;
      return;
    }
    const [cx, cy] = canvasPoint(ev);
    rubberBand = null;
    controller.autoRefine = autoRefine.checked;
    void controller.endDraft(dragToDraft(view, start[0], start[1], cx, cy))
      .catch(showError);
  });

  canvas.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    const [cx, cy] = canvasPoint(ev);
    const factor = Math.exp(-ev.deltaY * 0.0015);
    const next = zoomAt(view, factor, cx, cy);
    if (next.zoom >= ZOOM_MIN && next.zoom <= ZOOM_MAX) {
      view = next;
      repaint();
    }
  }, { passive: false });

  window.addEventListener('keydown', (ev) => {
    if (ev.target instanceof HTMLInputElement) return;
    if (ev.key === 'Enter' || ev.key === 'Escape' || ev.key === 'ArrowRight') {
      ev.preventDefault();
      void controller.handleKey(ev.key).catch(showError);
    }
  });

  classInput.addEventListener('change', () => {
    controller.classTag = classInput.value.trim() || 'object';
  });
  autoRefine.addEventListener('change', () => {
    controller.autoRefine = autoRefine.checked;
  });
  acceptBtn.addEventListener('click', () => void controller.accept().catch(showError));
  rejectBtn.addEventListener('click', () => controller.reject());
  refineBtn.addEventListener('click', () => void controller.requestRefine().catch(showError));
  clearBtn.addEventListener('click', () => controller.clearDraft());
  retryBtn.addEventListener('click', () => void controller.requestRefine().catch(showError));
  dismissBtn.addEventListener('click', () => controller.dismissError());
  prevBtn.addEventListener('click', () => {
    const n = controller.images.length;
    if (n > 0) void controller.openImage((controller.imageIndex - 1 + n) % n).catch(showError);
  });
  nextBtn.addEventListener('click', () => void controller.nextImage().catch(showError));

  controller.subscribe(() => {
    const image = controller.currentImage();
    if (image !== null && image.id !== loadedImageId) {
      imageEl = null;
      loadImageBitmap(image.id);
    }
    repaint();
  });

  window.addEventListener('resize', () => {
    sizeCanvas();
    const image = controller.currentImage();
    if (image !== null) {
      view = fitView(image.width, image.height, canvas.width, canvas.height);
    }
    repaint();
  });

  sizeCanvas();
  repaint();

  void (async () => {
    try {
      await client.health();
    } catch {
      // 503 just means no checkpoint yet; keep going, /refine will say so
    }
    try {
      await controller.loadImageList();
      if (controller.images.length > 0) {
        await controller.openImage(0);
      } else {
        status.textContent = 'service has no images';
      }
    } catch (err) {
      showError(err);
    }
  })();
}

main();
