/** Client-side mean luminance, matching the service's BT.601 weighting on
 * 8-bit pixel values scaled to [0, 1].
 */

const WR = 0.299;
const WG = 0.587;
const WB = 0.114;

export function meanLuminance(
  data: Uint8Array | Uint8ClampedArray,
  stride: 3 | 4,
): number {
  if (data.length === 0 || data.length % stride !== 0) {
    throw new Error(`pixel buffer length ${data.length} not a multiple of ${stride}`);
  }
  let sum = 0;
  for (let i = 0; i < data.length; i += stride) {
    sum += WR * data[i]! + WG * data[i + 1]! + WB * data[i + 2]!;
  }
  return sum / ((data.length / stride) * 255);
}
