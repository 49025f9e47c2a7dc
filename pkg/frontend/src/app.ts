/**
 * Application wiring: case list, slice viewer with zoom/pan, click
 * placement, and the metric chart. All segmentation state lives on the
 * server; this client only issues clicks and re-renders.
 */

import { ApiError, Client, MetricRow, VolumeEntry } from './api.js'
import { buildChartSeries, drawChart } from './chart.js'
import { Marker, drawMarkers, tintOverlay } from './overlay.js'
import {
  ViewState,
  axisIndexOf,
  beginClick,
  clickInputEnabled,
  completeClick,
  failClick,
  initialViewState,
  openSession,
  setAxis,
  setSlice,
} from './state.js'
import {
  Axis,
  ViewTransform,
  fitTransform,
  pan,
  screenToVoxel,
  sliceAxes,
  sliceShape,
  sliceToVoxel,
  voxelToScreen,
  zoomAt,
} from './viewport.js'

const SERVICE_BASE = (window as any).ICR_SERVICE_URL ?? 'http://127.0.0.1:8000'

interface ClickRecord {
  voxel: [number, number, number]
  label: 'positive' | 'negative'
}

class App {
  private client = new Client(SERVICE_BASE)
  private state: ViewState = initialViewState()
  private transform: ViewTransform = { zoom: 8, panX: 0, panY: 0 }
  private volumes: VolumeEntry[] = []
  private clicks: ClickRecord[] = []
  private dragging = false
  private dragMoved = false
  private lastPointer: [number, number] = [0, 0]

  private canvas = document.getElementById('view') as HTMLCanvasElement
  private chartCanvas = document.getElementById('chart') as HTMLCanvasElement
  private caseSelect = document.getElementById('case-select') as HTMLSelectElement
  private modelSelect = document.getElementById('model-select') as HTMLSelectElement
  private sliceSlider = document.getElementById('slice') as HTMLInputElement
  private sliceLabel = document.getElementById('slice-label') as HTMLSpanElement
  private banner = document.getElementById('banner') as HTMLDivElement
  private statusEl = document.getElementById('status') as HTMLSpanElement

  async start(): Promise<void> {
    this.bindControls()
    try {
      this.volumes = await this.client.listVolumes()
    } catch (err) {
      this.showError(err)
      return
    }
    this.caseSelect.innerHTML = ''
    for (const v of this.volumes) {
      const opt = document.createElement('option')
      opt.value = v.case_id
      opt.textContent = `${v.case_id}${v.has_gtv ? '' : ' (no truth)'}`
      this.caseSelect.appendChild(opt)
    }
    if (this.volumes.length > 0) await this.openCase(this.volumes[0].case_id)
  }

  private bindControls(): void {
    this.caseSelect.addEventListener('change', () => this.openCase(this.caseSelect.value))
    this.modelSelect.addEventListener('change', () => this.openCase(this.caseSelect.value))
    document.getElementById('reset')!.addEventListener('click', () => this.resetSession())
    for (const axis of ['x', 'y', 'z'] as Axis[]) {
      document
        .getElementById(`axis-${axis}`)!
        .addEventListener('click', () => this.changeAxis(axis))
    }
    for (const mode of ['positive', 'negative'] as const) {
      document.getElementById(`mode-${mode}`)!.addEventListener('change', () => {
        this.state = { ...this.state, clickMode: mode }
      })
    }
    this.sliceSlider.addEventListener('input', () => {
      this.state = setSlice(this.state, Number(this.sliceSlider.value))
      void this.render()
    })
    const baseSelect = document.getElementById('base-layer') as HTMLSelectElement
    baseSelect.addEventListener('change', () => {
      this.state = {
        ...this.state,
        layers: { ...this.state.layers, base: baseSelect.value as 'ct' | 'pet' },
      }
      void this.render()
    })
    const maskToggle = document.getElementById('show-mask') as HTMLInputElement
    maskToggle.addEventListener('change', () => {
      this.state = {
        ...this.state,
        layers: { ...this.state.layers, showMask: maskToggle.checked },
      }
      void this.render()
    })
    const alphaSlider = document.getElementById('alpha') as HTMLInputElement
    alphaSlider.addEventListener('input', () => {
      this.state = {
        ...this.state,
        layers: { ...this.state.layers, overlayAlpha: Number(alphaSlider.value) / 100 },
      }
      void this.render()
    })

    this.canvas.addEventListener('wheel', (ev) => {
      ev.preventDefault()
      const rect = this.canvas.getBoundingClientRect()
      const factor = ev.deltaY < 0 ? 1.25 : 0.8
      this.transform = zoomAt(
        this.transform,
        ev.clientX - rect.left,
        ev.clientY - rect.top,
        factor,
      )
      void this.render()
    })
    this.canvas.addEventListener('pointerdown', (ev) => {
      this.dragging = true
      this.dragMoved = false
      this.lastPointer = [ev.clientX, ev.clientY]
    })
    this.canvas.addEventListener('pointermove', (ev) => {
      if (!this.dragging) return
      const dx = ev.clientX - this.lastPointer[0]
      const dy = ev.clientY - this.lastPointer[1]
      if (Math.abs(dx) + Math.abs(dy) > 2) this.dragMoved = true
      if (this.dragMoved) {
        this.transform = pan(this.transform, dx, dy)
        this.lastPointer = [ev.clientX, ev.clientY]
        void this.render()
      }
    })
    this.canvas.addEventListener('pointerup', (ev) => {
      const wasDrag = this.dragMoved
      this.dragging = false
      this.dragMoved = false
      if (!wasDrag) void this.placeClick(ev)
    })
    this.canvas.addEventListener('pointerleave', () => {
      this.dragging = false
    })
  }

  private async openCase(caseId: string): Promise<void> {
    this.clearError()
    try {
      const info = await this.client.createSession(caseId, this.modelSelect.value)
      const vol = this.volumes.find((v) => v.case_id === caseId)
      this.state = openSession(this.state, info.session_id, info.dims, vol?.has_gtv ?? false)
      this.clicks = []
      const shape = sliceShape(this.state.axis, {
        nx: info.dims[0],
        ny: info.dims[1],
        nz: info.dims[2],
      })
      this.transform = fitTransform(shape, this.canvas.width, this.canvas.height)
      this.syncSliceSlider()
      await this.refreshMetrics()
      await this.render()
    } catch (err) {
      this.showError(err)
    }
  }

  private async resetSession(): Promise<void> {
    if (this.state.sessionId === null) return
    try {
      await this.client.reset(this.state.sessionId)
      this.state = { ...this.state, t: 0, metricHistory: [] }
      this.clicks = []
      await this.refreshMetrics()
      await this.render()
    } catch (err) {
      this.showError(err)
    }
  }

  private changeAxis(axis: Axis): void {
    this.state = setAxis(this.state, axis)
    if (this.state.dims) {
      const shape = sliceShape(axis, {
        nx: this.state.dims[0],
        ny: this.state.dims[1],
        nz: this.state.dims[2],
      })
      this.transform = fitTransform(shape, this.canvas.width, this.canvas.height)
    }
    this.syncSliceSlider()
    void this.render()
  }

  private syncSliceSlider(): void {
    if (!this.state.dims) return
    const max = this.state.dims[axisIndexOf(this.state.axis)] - 1
    this.sliceSlider.max = String(max)
    this.sliceSlider.value = String(this.state.sliceIndex)
    this.sliceLabel.textContent = `${this.state.axis}=${this.state.sliceIndex}`
  }

  private async placeClick(ev: PointerEvent): Promise<void> {
    if (!clickInputEnabled(this.state) || !this.state.dims) return
    const rect = this.canvas.getBoundingClientRect()
    const shape = sliceShape(this.state.axis, {
      nx: this.state.dims[0],
      ny: this.state.dims[1],
      nz: this.state.dims[2],
    })
    const hit = screenToVoxel(
      ev.clientX - rect.left,
      ev.clientY - rect.top,
      this.transform,
      shape,
    )
    if (hit === null) return
    const voxel = sliceToVoxel(this.state.axis, this.state.sliceIndex, hit.row, hit.col)
    const claimed = beginClick(this.state)
    if (claimed === false) return
    this.state = claimed
    this.updateStatus()
    try {
      const result = await this.client.postClick(
        this.state.sessionId!,
        voxel,
        this.state.clickMode,
      )
      this.state = completeClick(this.state, result.t)
      this.clicks.push({ voxel, label: this.state.clickMode })
      await this.refreshMetrics()
      await this.render()
    } catch (err) {
      this.state = failClick(this.state)
      this.showError(err)
    }
    this.updateStatus()
  }

  private async refreshMetrics(): Promise<void> {
    if (this.state.sessionId === null || !this.state.hasGtv) {
      this.chartCanvas.style.display = this.state.hasGtv ? '' : 'none'
      return
    }
    try {
      const { rows } = await this.client.metrics(this.state.sessionId)
      this.state = { ...this.state, metricHistory: rows as MetricRow[] }
      this.chartCanvas.style.display = ''
      drawChart(this.chartCanvas, buildChartSeries(this.state.metricHistory))
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.chartCanvas.style.display = 'none'
        return
      }
      this.showError(err)
    }
  }

  private async loadSlice(layer: string): Promise<ImageBitmap> {
    const url = this.client.sliceUrl(
      this.state.sessionId!,
      this.state.axis,
      this.state.sliceIndex,
      layer,
    )
    const resp = await fetch(url)
    if (!resp.ok) throw new ApiError(resp.status, `slice ${layer} failed`)
    return createImageBitmap(await resp.blob())
  }

  private async render(): Promise<void> {
    if (this.state.sessionId === null) return
    const ctx = this.canvas.getContext('2d')!
    ctx.imageSmoothingEnabled = false
    ctx.fillStyle = '#05070a'
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height)
    try {
      const base = await this.loadSlice(this.state.layers.base)
      const t = this.transform
      ctx.drawImage(base, t.panX, t.panY, base.width * t.zoom, base.height * t.zoom)
      if (this.state.layers.showMask) {
        const mask = await this.loadSlice('mask')
        const off = document.createElement('canvas')
        off.width = mask.width
        off.height = mask.height
        const octx = off.getContext('2d')!
        octx.drawImage(mask, 0, 0)
        const tinted = tintOverlay(
          octx.getImageData(0, 0, off.width, off.height),
          'mask',
          this.state.layers.overlayAlpha,
        )
        octx.putImageData(tinted, 0, 0)
        ctx.drawImage(off, t.panX, t.panY, off.width * t.zoom, off.height * t.zoom)
      }
      this.drawVisibleMarkers(ctx)
      this.updateStatus()
    } catch (err) {
      this.showError(err)
    }
  }

  private drawVisibleMarkers(ctx: CanvasRenderingContext2D): void {
    const [rowAxis, colAxis] = sliceAxes(this.state.axis)
    const a = axisIndexOf(this.state.axis)
    const markers: Marker[] = this.clicks
      .filter((c) => c.voxel[a] === this.state.sliceIndex)
      .map((c) => ({ row: c.voxel[rowAxis], col: c.voxel[colAxis], label: c.label }))
    drawMarkers(ctx, markers, this.transform)
  }

  private updateStatus(): void {
    const busy = this.state.inFlight
    this.statusEl.textContent = busy
      ? `t=${this.state.t} refining...`
      : `t=${this.state.t}`
    this.canvas.style.cursor = busy ? 'wait' : 'crosshair'
    this.canvas.classList.toggle('busy', busy)
  }

  private showError(err: unknown): void {
    const message =
      err instanceof ApiError
        ? `service error ${err.status}: ${err.message}`
        : `error: ${String(err)}`
    this.banner.textContent = message
    this.banner.style.display = 'block'
  }

  private clearError(): void {
    this.banner.style.display = 'none'
  }
}

new App().start()
