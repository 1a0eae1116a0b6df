// @vitest-environment jsdom
import { beforeEach, describe, expect, test } from "vitest";

import type { Meta, RenderRequest, SweepEntry } from "../src/api.js";
import { decodeFragment, encodeFragment } from "../src/state.js";
import { createViewer, DecodedPixels } from "../src/viewer.js";

interface Deferred {
  req: RenderRequest;
  resolve: (png: Uint8Array) => void;
  reject: (err: Error) => void;
}

/** Stand-in for ApiClient: manual mode queues render calls for the test to settle. */
class FakeClient {
  requests: RenderRequest[] = [];
  pending: Deferred[] = [];
  manual = false;
  failNext = false;
  private counter = 1;

  async meta(): Promise<Meta> {
    return {
      primitive_count: 8,
      sh_degree: 1,
      provenance: "test",
      s_bright_range: [-1.0, 1.5],
      sweep_points: [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5],
      default_camera: {
        pose: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 4],
        intrinsics: [70.4, 70.4, 32, 32],
        resolution: [64, 64],
      },
      max_resolution: 256,
      field: { center: [0, 0, 1], extent: [2, 2, 2] },
    };
  }

  render(req: RenderRequest): Promise<Uint8Array> {
    this.requests.push(req);
    if (this.failNext) {
      this.failNext = false;
      return Promise.reject(new Error("boom"));
    }
    if (!this.manual) return Promise.resolve(new Uint8Array([this.counter++]));
    return new Promise((resolve, reject) => {
      this.pending.push({ req, resolve, reject });
    });
  }

  async sweep(): Promise<SweepEntry[]> {
    return [];
  }
}

// Luminance becomes png[0]/255 so tests can tell frames apart by first byte.
async function fakeDecode(png: Uint8Array): Promise<DecodedPixels> {
  const v = png[0] ?? 0;
  return { data: new Uint8Array([v, v, v]), stride: 3 };
}

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

async function until(cond: () => boolean, ms = 2000): Promise<void> {
  const t0 = Date.now();
  while (!cond()) {
    if (Date.now() - t0 > ms) throw new Error("condition not met in time");
    await sleep(5);
  }
}

let root: HTMLElement;
let client: FakeClient;

beforeEach(() => {
  document.body.innerHTML = "<div id='app'></div>";
  root = document.getElementById("app")!;
  client = new FakeClient();
});

describe("viewer", () => {
  test("initial render populates image and slider bounds from meta", async () => {
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      fragment: { read: () => "", write: () => undefined },
    });
    expect(viewer.frameCount()).toBe(1);
    const slider = root.querySelector<HTMLInputElement>(".s-slider")!;
    expect(slider.min).toBe("-1");
    expect(slider.max).toBe("1.5");
    const img = root.querySelector<HTMLImageElement>(".frame")!;
    expect(img.src.startsWith("data:image/png;base64,")).toBe(true);
    expect(client.requests[0]?.s_bright).toBe(0);
    expect(client.requests[0]?.resolution).toEqual([64, 64]);
    expect(client.requests[0]?.pose).toHaveLength(12);
  });

  test("slider burst debounces to a single render with the final value", async () => {
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      sliderDebounceMs: 20,
      fragment: { read: () => "", write: () => undefined },
    });
    const slider = root.querySelector<HTMLInputElement>(".s-slider")!;
    for (const v of ["0.2", "0.4", "0.6", "0.8", "1.0"]) {
      slider.value = v;
      slider.dispatchEvent(new Event("input"));
    }
    await until(() => viewer.frameCount() === 2);
    await sleep(60);
    expect(viewer.frameCount()).toBe(2);
    expect(client.requests).toHaveLength(2);
    expect(client.requests[1]?.s_bright).toBeCloseTo(1.0, 6);
    expect(viewer.state().s).toBeCloseTo(1.0, 6);
  });

  test("latest wins: a slow stale frame cannot replace a newer one", async () => {
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      cameraDebounceMs: 10000,
      sliderDebounceMs: 10000,
      fragment: { read: () => "", write: () => undefined },
    });
    client.manual = true;
    viewer.setBrightness(0.5);
    const a = viewer.renderNow();
    viewer.setBrightness(1.5);
    const b = viewer.renderNow();
    expect(client.pending).toHaveLength(2);
    client.pending[1]!.resolve(new Uint8Array([200]));
    await b;
    expect(viewer.lastLuminance()).toBeCloseTo(200 / 255, 6);
    client.pending[0]!.resolve(new Uint8Array([10]));
    await a;
    expect(viewer.lastLuminance()).toBeCloseTo(200 / 255, 6);
    expect(viewer.frameCount()).toBe(2);
  });

  test("failure shows the banner and retry recovers", async () => {
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      fragment: { read: () => "", write: () => undefined },
    });
    const errorBox = root.querySelector<HTMLElement>(".error")!;
    expect(errorBox.hidden).toBe(true);
    client.failNext = true;
    await viewer.renderNow();
    expect(errorBox.hidden).toBe(false);
    expect(errorBox.querySelector(".message")!.textContent).toContain("boom");
    root.querySelector<HTMLButtonElement>(".retry")!.click();
    await until(() => viewer.frameCount() === 2);
    expect(errorBox.hidden).toBe(true);
  });

  test("state round-trips through the fragment on every render", async () => {
    let written = "";
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      fragment: { read: () => "", write: (f) => (written = f) },
    });
    expect(written).not.toBe("");
    viewer.setBrightness(0.75);
    await viewer.renderNow();
    const fallback = { orbit: viewer.state().orbit, s: -9 };
    expect(decodeFragment(`#${written}`, fallback).s).toBeCloseTo(0.75, 4);
  });

  test("initial state comes from the fragment when present", async () => {
    const orbit = { target: [0, 0, 1] as [number, number, number], radius: 5, yaw: 0.4, pitch: 0.1 };
    const frag = encodeFragment({ orbit, s: 1.2 });
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      fragment: { read: () => `#${frag}`, write: () => undefined },
    });
    expect(viewer.state().s).toBeCloseTo(1.2, 4);
    expect(viewer.state().orbit.yaw).toBeCloseTo(0.4, 4);
    const slider = root.querySelector<HTMLInputElement>(".s-slider")!;
    expect(Number(slider.value)).toBeCloseTo(1.2, 4);
  });

  test("rotate and zoom change the requested pose", async () => {
    const viewer = await createViewer(root, client, {
      decode: fakeDecode,
      cameraDebounceMs: 5,
      fragment: { read: () => "", write: () => undefined },
    });
    const before = client.requests[0]!.pose.slice();
    viewer.rotateBy(0.3, 0.1);
    await until(() => viewer.frameCount() === 2);
    const after = client.requests[1]!.pose;
    expect(after).not.toEqual(before);
    expect(after).toHaveLength(12);
  });
});
