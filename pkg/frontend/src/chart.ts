/**
 * DSC/SDSC-versus-interactions chart.
 *
 * Series values are taken verbatim from the service metric rows; the
 * renderer only scales for display, so the plotted numbers equal the
 * /metrics JSON exactly.
 */

import type { MetricRow } from './api.js'

export interface ChartSeries {
  t: number[]
  dsc: number[]
  sdsc: number[]
}

export function buildChartSeries(rows: MetricRow[]): ChartSeries {
  const sorted = [...rows].sort((a, b) => a.t - b.t)
  return {
    t: sorted.map((r) => r.t),
    dsc: sorted.map((r) => r.dsc),
    sdsc: sorted.map((r) => r.sdsc),
  }
}

const MARGIN = { left: 34, right: 8, top: 8, bottom: 20 }

export function drawChart(canvas: HTMLCanvasElement, series: ChartSeries): void {
  const ctx = canvas.getContext('2d')
  if (!ctx) return
  const w = canvas.width
  const h = canvas.height
  ctx.clearRect(0, 0, w, h)
  ctx.fillStyle = '#141821'
  ctx.fillRect(0, 0, w, h)
  const plotW = w - MARGIN.left - MARGIN.right
  const plotH = h - MARGIN.top - MARGIN.bottom
  const maxT = Math.max(1, series.t.length > 0 ? series.t[series.t.length - 1] : 1)

  const px = (t: number) => MARGIN.left + (t / maxT) * plotW
  const py = (v: number) => MARGIN.top + (1 - v) * plotH

  ctx.strokeStyle = '#39424e'
  ctx.lineWidth = 1
  ctx.strokeRect(MARGIN.left, MARGIN.top, plotW, plotH)
  ctx.fillStyle = '#8a93a0'
  ctx.font = '10px sans-serif'
  for (const v of [0, 0.5, 1]) {
    ctx.fillText(v.toFixed(1), 6, py(v) + 3)
  }
  for (let t = 0; t <= maxT; t++) {
    ctx.fillText(String(t), px(t) - 3, h - 6)
  }

  const lines: Array<[keyof ChartSeries, string]> = [
    ['dsc', '#4fc3f7'],
    ['sdsc', '#ffb74d'],
  ]
  for (const [key, color] of lines) {
    const values = series[key] as number[]
    if (values.length === 0) continue
    ctx.strokeStyle = color
    ctx.lineWidth = 2
    ctx.beginPath()
    values.forEach((v, idx) => {
      const x = px(series.t[idx])
      const y = py(v)
      if (idx === 0) ctx.moveTo(x, y)
      else ctx.lineTo(x, y)
    })
    ctx.stroke()
    ctx.fillStyle = color
    values.forEach((v, idx) => {
      ctx.beginPath()
      ctx.arc(px(series.t[idx]), py(v), 3, 0, Math.PI * 2)
      ctx.fill()
    })
  }
  ctx.fillStyle = '#4fc3f7'
  ctx.fillText('DSC', MARGIN.left + 6, MARGIN.top + 12)
  ctx.fillStyle = '#ffb74d'
  ctx.fillText('SDSC', MARGIN.left + 44, MARGIN.top + 12)
}
