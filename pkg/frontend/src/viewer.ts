/** DOM wiring: one image, an orbit drag surface, a brightness slider.
 *
 * Camera moves debounce at 33 ms and slider moves at 80 ms; completed
 * requests pass through a latest-wins gate so a slow old frame never
 * replaces a newer one. Failures surface in a banner with a retry button.
 */

import { Meta, RenderClient, RenderRequest } from "./api.js";
import { createLatestWins, debounce } from "./latest.js";
import { meanLuminance } from "./luminance.js";
import { orbitFromPose, poseFromOrbit, rotated, zoomed } from "./orbit.js";
import { ViewState, decodeFragment, encodeFragment } from "./state.js";

export interface DecodedPixels {
  data: Uint8Array | Uint8ClampedArray;
  stride: 3 | 4;
}

export type PngDecoder = (png: Uint8Array) => Promise<DecodedPixels>;

export interface ViewerOptions {
  decode?: PngDecoder;
  cameraDebounceMs?: number;
  sliderDebounceMs?: number;
  fragment?: { read: () => string; write: (frag: string) => void };
}

interface Frame {
  png: Uint8Array;
  luminance: number;
}

const DRAG_RADIANS_PER_PX = 0.01;

async function canvasDecode(png: Uint8Array): Promise<DecodedPixels> {
  const copy = new Uint8Array(png);
  const bitmap = await createImageBitmap(new Blob([copy], { type: "image/png" }));
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas unavailable");
  ctx.drawImage(bitmap, 0, 0);
  const img = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { data: img.data, stride: 4 };
}

function pngDataUrl(png: Uint8Array): string {
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < png.length; i += chunk) {
    binary += String.fromCharCode(...png.subarray(i, i + chunk));
  }
  return `data:image/png;base64,${btoa(binary)}`;
}

export interface Viewer {
  element: HTMLElement;
  state: () => ViewState;
  setBrightness: (s: number) => void;
  rotateBy: (dyaw: number, dpitch: number) => void;
  zoomBy: (factor: number) => void;
  renderNow: () => Promise<void>;
  frameCount: () => number;
  lastLuminance: () => number | null;
}

export async function createViewer(
  root: HTMLElement,
  client: RenderClient,
  opts: ViewerOptions = {},
): Promise<Viewer> {
  const meta: Meta = await client.meta();
  const decode = opts.decode ?? canvasDecode;
  const fragment = opts.fragment ?? {
    read: () => window.location.hash,
    write: (frag: string) => window.history.replaceState(null, "", `#${frag}`),
  };

  const [sMin, sMax] = meta.s_bright_range;
  const fallback: ViewState = {
    orbit: orbitFromPose(meta.default_camera.pose, meta.field.center),
    s: 0,
  };
  let state = decodeFragment(fragment.read(), fallback);
  state = { ...state, s: Math.min(sMax, Math.max(sMin, state.s)) };

  root.innerHTML = `
    <div class="lumisplat-viewer">
      <img class="frame" draggable="false" alt="rendered view">
      <div class="controls">
        <label>brightness
          <input class="s-slider" type="range"
                 min="${sMin}" max="${sMax}" step="0.01" value="${state.s}">
        </label>
        <span class="s-value">${state.s.toFixed(2)}</span>
        <span class="luminance">luminance: –</span>
      </div>
      <div class="error" hidden>
        <span class="message"></span>
        <button class="retry" type="button">retry</button>
      </div>
    </div>`;
  const el = root.querySelector<HTMLElement>(".lumisplat-viewer")!;
  const img = el.querySelector<HTMLImageElement>(".frame")!;
  const slider = el.querySelector<HTMLInputElement>(".s-slider")!;
  const sValue = el.querySelector<HTMLElement>(".s-value")!;
  const lumText = el.querySelector<HTMLElement>(".luminance")!;
  const errorBox = el.querySelector<HTMLElement>(".error")!;
  const errorMsg = errorBox.querySelector<HTMLElement>(".message")!;
  const retry = errorBox.querySelector<HTMLButtonElement>(".retry")!;

  let frames = 0;
  let lastLum: number | null = null;

  const gate = createLatestWins<Frame>(
    (frame) => {
      img.src = pngDataUrl(frame.png);
      lastLum = frame.luminance;
      lumText.textContent = `luminance: ${frame.luminance.toFixed(4)}`;
      errorBox.hidden = true;
      frames++;
    },
    (err) => {
      errorMsg.textContent = err instanceof Error ? err.message : String(err);
      errorBox.hidden = false;
    },
  );

  function request(): RenderRequest {
    return {
      pose: poseFromOrbit(state.orbit),
      intrinsics: meta.default_camera.intrinsics,
      resolution: meta.default_camera.resolution,
      s_bright: state.s,
      encoding: "png",
    };
  }

  async function fetchFrame(): Promise<Frame> {
    const png = await client.render(request());
    const pixels = await decode(png);
    return { png, luminance: meanLuminance(pixels.data, pixels.stride) };
  }

  function renderNow(): Promise<void> {
    fragment.write(encodeFragment(state));
    return gate.dispatch(fetchFrame());
  }

  const cameraRender = debounce(renderNow, opts.cameraDebounceMs ?? 33);
  const sliderRender = debounce(renderNow, opts.sliderDebounceMs ?? 80);

  slider.addEventListener("input", () => {
    state = { ...state, s: Number(slider.value) };
    sValue.textContent = state.s.toFixed(2);
    sliderRender();
  });
  retry.addEventListener("click", () => {
    void renderNow();
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  img.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener?.("pointerup", () => {
    dragging = false;
  });
  img.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const dyaw = (ev.clientX - lastX) * DRAG_RADIANS_PER_PX;
    const dpitch = (ev.clientY - lastY) * DRAG_RADIANS_PER_PX;
    lastX = ev.clientX;
    lastY = ev.clientY;
    state = { ...state, orbit: rotated(state.orbit, dyaw, dpitch) };
    cameraRender();
  });
  img.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    state = { ...state, orbit: zoomed(state.orbit, ev.deltaY > 0 ? 1.1 : 0.9) };
    cameraRender();
  });

  const viewer: Viewer = {
    element: el,
    state: () => state,
    setBrightness: (s) => {
      state = { ...state, s: Math.min(sMax, Math.max(sMin, s)) };
      slider.value = String(state.s);
      sValue.textContent = state.s.toFixed(2);
      sliderRender();
    },
    rotateBy: (dyaw, dpitch) => {
      state = { ...state, orbit: rotated(state.orbit, dyaw, dpitch) };
      cameraRender();
    },
    zoomBy: (factor) => {
      state = { ...state, orbit: zoomed(state.orbit, factor) };
      cameraRender();
    },
    renderNow,
    frameCount: () => frames,
    lastLuminance: () => lastLum,
  };
  await renderNow();
  return viewer;
}
