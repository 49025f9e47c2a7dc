/**
 * View state and the single-in-flight click gate.
 *
 * The service serializes refinements per session (409 while busy), so
 * the client keeps at most one click outstanding: beginClick() claims
 * the slot or returns false, and input stays disabled until the
 * response settles the claim.
 */

import type { Axis } from './viewport.js'
import type { MetricRow } from './api.js'

export type ClickMode = 'positive' | 'negative'

export interface LayerToggles {
  base: 'ct' | 'pet'
  showMask: boolean
  showProb: boolean
  overlayAlpha: number
}

export interface ViewState {
  sessionId: string | null
  dims: [number, number, number] | null
  axis: Axis
  sliceIndex: number
  clickMode: ClickMode
  layers: LayerToggles
  t: number
  inFlight: boolean
  metricHistory: MetricRow[]
  hasGtv: boolean
}

export function initialViewState(): ViewState {
  return {
    sessionId: null,
    dims: null,
    axis: 'z',
    sliceIndex: 0,
    clickMode: 'positive',
    layers: { base: 'ct', showMask: true, showProb: false, overlayAlpha: 0.45 },
    t: 0,
    inFlight: false,
    metricHistory: [],
    hasGtv: false,
  }
}

export function openSession(
  state: ViewState,
  sessionId: string,
  dims: [number, number, number],
  hasGtv: boolean,
): ViewState {
  const axis: Axis = 'z'
  return {
    ...state,
    sessionId,
    dims,
    axis,
    sliceIndex: Math.floor(dims[2] / 2),
    t: 0,
    inFlight: false,
    metricHistory: [],
    hasGtv,
  }
}

/** Claim the in-flight slot; false means a refinement is already pending. */
export function beginClick(state: ViewState): ViewState | false {
  if (state.inFlight || state.sessionId === null) return false
  return { ...state, inFlight: true }
}

export function completeClick(state: ViewState, t: number): ViewState {
  return { ...state, inFlight: false, t }
}

export function failClick(state: ViewState): ViewState {
  return { ...state, inFlight: false }
}

export function clickInputEnabled(state: ViewState): boolean {
  return state.sessionId !== null && !state.inFlight
}

export function setSlice(state: ViewState, index: number): ViewState {
  if (state.dims === null) return state
  const max = state.dims[axisIndexOf(state.axis)] - 1
  const clamped = Math.min(Math.max(index, 0), max)
  return { ...state, sliceIndex: clamped }
}

export function setAxis(state: ViewState, axis: Axis): ViewState {
  if (state.dims === null) return { ...state, axis }
  const mid = Math.floor(state.dims[axisIndexOf(axis)] / 2)
  return { ...state, axis, sliceIndex: mid }
}

export function axisIndexOf(axis: Axis): number {
  return axis === 'x' ? 0 : axis === 'y' ? 1 : 2
}
