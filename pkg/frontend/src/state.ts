/** URL-fragment persistence for the view state, so links restore the view. */

import type { Orbit } from "./orbit.js";

export interface ViewState {
  orbit: Orbit;
  s: number;
}

const KEYS = ["yaw", "pitch", "radius", "s", "tx", "ty", "tz"] as const;

export function encodeFragment(state: ViewState): string {
  const o = state.orbit;
  const vals: Record<(typeof KEYS)[number], number> = {
    yaw: o.yaw, pitch: o.pitch, radius: o.radius, s: state.s,
    tx: o.target[0], ty: o.target[1], tz: o.target[2],
  };
  return KEYS.map((k) => `${k}=${vals[k].toFixed(4)}`).join("&");
}

export function decodeFragment(fragment: string, fallback: ViewState): ViewState {
  const raw = fragment.startsWith("#") ? fragment.slice(1) : fragment;
  if (!raw) return fallback;
  const parts = new Map<string, number>();
  for (const piece of raw.split("&")) {
    const [k, v] = piece.split("=");
    if (k === undefined || v === undefined || v === "") continue;
    const num = Number(v);
    if (Number.isFinite(num)) parts.set(k, num);
  }
  const get = (k: string, dflt: number) => parts.get(k) ?? dflt;
  const fo = fallback.orbit;
  return {
    orbit: {
      target: [get("tx", fo.target[0]), get("ty", fo.target[1]), get("tz", fo.target[2])],
      radius: get("radius", fo.radius),
      yaw: get("yaw", fo.yaw),
      pitch: get("pitch", fo.pitch),
    },
    s: get("s", fallback.s),
  };
}
