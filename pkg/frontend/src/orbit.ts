/** Orbit camera state and its mapping to the service's wire pose.
 *
 * The service expects a row-major 3x4 world-to-camera matrix built the same
 * way the training scenes build theirs: z looks from the camera toward the
 * target, x = normalize(up x z) with world up +Y, y = z x x, t = -R * pos.
 */

export interface Orbit {
  target: [number, number, number];
  radius: number;
  yaw: number;    // around world +Y, 0 looks along +Z
  pitch: number;  // positive lifts the camera toward +Y
}

type Vec3 = [number, number, number];

const MIN_RADIUS = 0.5;
const MAX_RADIUS = 50;
const MAX_PITCH = Math.PI / 2 - 0.05;

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

function normalize(a: Vec3): Vec3 {
  return scale(a, 1 / norm(a));
}

export function cameraPosition(o: Orbit): Vec3 {
  const cp = Math.cos(o.pitch);
  return [
    o.target[0] + o.radius * Math.sin(o.yaw) * cp,
    o.target[1] + o.radius * Math.sin(o.pitch),
    o.target[2] + o.radius * Math.cos(o.yaw) * cp,
  ];
}

export function poseFromOrbit(o: Orbit): number[] {
  const pos = cameraPosition(o);
  const z = normalize(sub(o.target, pos));
  let x = cross([0, 1, 0], z);
  const n = norm(x);
  x = n < 1e-6 ? [1, 0, 0] : scale(x, 1 / n);
  const y = cross(z, x);
  const t: Vec3 = [-dot(x, pos), -dot(y, pos), -dot(z, pos)];
  return [
    x[0], x[1], x[2], t[0],
    y[0], y[1], y[2], t[1],
    z[0], z[1], z[2], t[2],
  ];
}

/** Recover an orbit from a wire pose, aiming at the point on the camera's
 * forward ray nearest the given center (so re-encoding reproduces the pose).
 */
export function orbitFromPose(pose: number[], center: number[]): Orbit {
  if (pose.length !== 12) throw new Error("pose must hold 12 floats");
  const x: Vec3 = [pose[0]!, pose[1]!, pose[2]!];
  const y: Vec3 = [pose[4]!, pose[5]!, pose[6]!];
  const z: Vec3 = [pose[8]!, pose[9]!, pose[10]!];
  const t: Vec3 = [pose[3]!, pose[7]!, pose[11]!];
  // camera center: C = -R^T t
  const pos: Vec3 = [
    -(x[0] * t[0] + y[0] * t[1] + z[0] * t[2]),
    -(x[1] * t[0] + y[1] * t[1] + z[1] * t[2]),
    -(x[2] * t[0] + y[2] * t[1] + z[2] * t[2]),
  ];
  const along = dot(sub([center[0]!, center[1]!, center[2]!], pos), z);
  const radius = Math.min(Math.max(along, MIN_RADIUS), MAX_RADIUS);
  const target: Vec3 = [
    pos[0] + radius * z[0],
    pos[1] + radius * z[1],
    pos[2] + radius * z[2],
  ];
  const offset = scale(z, -1);
  return {
    target,
    radius,
    yaw: Math.atan2(offset[0], offset[2]),
    pitch: Math.asin(Math.min(1, Math.max(-1, offset[1]))),
  };
}

export function rotated(o: Orbit, dyaw: number, dpitch: number): Orbit {
  const pitch = Math.min(MAX_PITCH, Math.max(-MAX_PITCH, o.pitch + dpitch));
  let yaw = o.yaw + dyaw;
  if (yaw > Math.PI) yaw -= 2 * Math.PI;
  if (yaw < -Math.PI) yaw += 2 * Math.PI;
  return { ...o, yaw, pitch };
}

export function zoomed(o: Orbit, factor: number): Orbit {
  const radius = Math.min(MAX_RADIUS, Math.max(MIN_RADIUS, o.radius * factor));
  return { ...o, radius };
}
