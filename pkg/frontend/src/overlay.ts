/**
 * Slice compositing: grayscale base layer, tinted mask/probability
 * overlays with a contour, and click markers (plus for additive,
 * minus for subtractive clicks).
 */

import type { ViewTransform } from './viewport.js'
import { voxelToScreen } from './viewport.js'

export interface Marker {
  row: number
  col: number
  label: 'positive' | 'negative'
}

const MASK_TINT: [number, number, number] = [64, 200, 120]
const PROB_TINT: [number, number, number] = [79, 140, 255]

function isBoundary(data: Uint8ClampedArray, w: number, h: number, x: number, y: number): boolean {
  const at = (xx: number, yy: number) => {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0
    return data[(yy * w + xx) * 4]
  }
  const v = at(x, y)
  if (v === 0) return false
  return at(x - 1, y) === 0 || at(x + 1, y) === 0 || at(x, y - 1) === 0 || at(x, y + 1) === 0
}

/** Tint a grayscale overlay image in place: fill plus opaque contour. */
export function tintOverlay(
  img: ImageData,
  kind: 'mask' | 'prob',
  alpha: number,
): ImageData {
  const [r, g, b] = kind === 'mask' ? MASK_TINT : PROB_TINT
  const { data, width, height } = img
  const src = new Uint8ClampedArray(data)
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const o = (y * width + x) * 4
      const value = src[o]
      const boundary = kind === 'mask' && isBoundary(src, width, height, x, y)
      const a = boundary ? 255 : Math.round((value / 255) * alpha * 255)
      data[o] = r
      data[o + 1] = g
      data[o + 2] = b
      data[o + 3] = a
    }
  }
  return img
}

export function drawMarkers(
  ctx: CanvasRenderingContext2D,
  markers: Marker[],
  t: ViewTransform,
): void {
  for (const m of markers) {
    const { sx, sy } = voxelToScreen(m.row, m.col, t)
    const r = Math.max(4, t.zoom * 0.6)
    ctx.strokeStyle = m.label === 'positive' ? '#7CFC00' : '#FF5252'
    ctx.lineWidth = 2
    ctx.beginPath()
    ctx.arc(sx, sy, r, 0, Math.PI * 2)
    ctx.stroke()
    ctx.beginPath()
    ctx.moveTo(sx - r * 0.6, sy)
    ctx.lineTo(sx + r * 0.6, sy)
    if (m.label === 'positive') {
      ctx.moveTo(sx, sy - r * 0.6)
      ctx.lineTo(sx, sy + r * 0.6)
    }
    ctx.stroke()
  }
}
