/**
 * Screen <-> voxel coordinate mapping for slice views.
 *
 * A slice PNG from the service maps image rows to the first remaining
 * volume axis and image columns to the second (x-fastest volumes sliced
 * with numpy take). The view transform scales image pixels by an
 * integer-or-float zoom and shifts by a pan offset in screen pixels.
 * Voxel centers map to screen points; the inverse floors back to the
 * containing voxel, so center round-trips are exact at any zoom/pan.
 */

export type Axis = 'x' | 'y' | 'z'

export interface ViewTransform {
  zoom: number
  panX: number
  panY: number
}

export interface Dims3 {
  nx: number
  ny: number
  nz: number
}

/** Volume axes shown by a slice: [rowAxis, colAxis] in 0=x,1=y,2=z. */
export function sliceAxes(axis: Axis): [number, number] {
  if (axis === 'x') return [1, 2]
  if (axis === 'y') return [0, 2]
  return [0, 1]
}

export function sliceShape(axis: Axis, dims: Dims3): { rows: number; cols: number } {
  const d = [dims.nx, dims.ny, dims.nz]
  const [ra, ca] = sliceAxes(axis)
  return { rows: d[ra], cols: d[ca] }
}

/** Screen position of a voxel's center within the slice plane. */
export function voxelToScreen(
  row: number,
  col: number,
  t: ViewTransform,
): { sx: number; sy: number } {
  return {
    sx: (col + 0.5) * t.zoom + t.panX,
    sy: (row + 0.5) * t.zoom + t.panY,
  }
}

/** Containing voxel of a screen position, or null when outside the slice. */
export function screenToVoxel(
  sx: number,
  sy: number,
  t: ViewTransform,
  shape: { rows: number; cols: number },
): { row: number; col: number } | null {
  const col = Math.floor((sx - t.panX) / t.zoom)
  const row = Math.floor((sy - t.panY) / t.zoom)
  if (row < 0 || col < 0 || row >= shape.rows || col >= shape.cols) return null
  return { row, col }
}

/** Assemble the (i, j, k) voxel from slice coordinates. */
export function sliceToVoxel(
  axis: Axis,
  sliceIndex: number,
  row: number,
  col: number,
): [number, number, number] {
  const voxel: [number, number, number] = [0, 0, 0]
  const [ra, ca] = sliceAxes(axis)
  voxel[ra] = row
  voxel[ca] = col
  voxel[axis === 'x' ? 0 : axis === 'y' ? 1 : 2] = sliceIndex
  return voxel
}

/** Zoom about a fixed screen point, preserving what sits underneath it. */
export function zoomAt(
  t: ViewTransform,
  sx: number,
  sy: number,
  factor: number,
  minZoom = 0.5,
  maxZoom = 64,
): ViewTransform {
  const zoom = Math.min(maxZoom, Math.max(minZoom, t.zoom * factor))
  const scale = zoom / t.zoom
  return {
    zoom,
    panX: sx - (sx - t.panX) * scale,
    panY: sy - (sy - t.panY) * scale,
  }
}

export function pan(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { zoom: t.zoom, panX: t.panX + dx, panY: t.panY + dy }
}

/** Transform that fits a slice into a canvas with a whole-pixel zoom. */
export function fitTransform(
  shape: { rows: number; cols: number },
  canvasW: number,
  canvasH: number,
): ViewTransform {
  const zoom = Math.max(1, Math.floor(Math.min(canvasW / shape.cols, canvasH / shape.rows)))
  return {
    zoom,
    panX: Math.floor((canvasW - shape.cols * zoom) / 2),
    panY: Math.floor((canvasH - shape.rows * zoom) / 2),
  }
}
