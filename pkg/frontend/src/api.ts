/** Typed client for the refinement service HTTP API. */

export interface VolumeEntry {
  case_id: string
  fold: number | null
  dims: [number, number, number] | null
  spacing: [number, number, number] | null
  has_gtv: boolean
}

export interface SessionInfo {
  session_id: string
  dims: [number, number, number]
  spacing: [number, number, number]
  t: number
}

export interface ClickResult {
  t: number
  changed_voxels: number
  dsc?: number
}

export interface MetricRow {
  t: number
  dsc: number
  assd_mm: number | null
  hd95_mm: number | null
  sdsc: number
  changed_voxels: number
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message)
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText
    try {
      const body = await resp.json()
      if (body && typeof body.error === 'string') detail = body.error
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail)
  }
  return resp.json() as Promise<T>
}

export class Client {
  constructor(private base: string = '') {}

  listVolumes(): Promise<VolumeEntry[]> {
    return fetch(`${this.base}/api/volumes`).then((r) => asJson<VolumeEntry[]>(r))
  }

  createSession(caseId: string, model: string): Promise<SessionInfo> {
    return fetch(`${this.base}/api/sessions`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ case_id: caseId, model }),
    }).then((r) => asJson<SessionInfo>(r))
  }

  sliceUrl(sessionId: string, axis: string, index: number, layer: string): string {
    return `${this.base}/api/sessions/${sessionId}/slice?axis=${axis}&index=${index}&layer=${layer}`
  }

  postClick(
    sessionId: string,
    voxel: [number, number, number],
    label: 'positive' | 'negative',
  ): Promise<ClickResult> {
    return fetch(`${this.base}/api/sessions/${sessionId}/clicks`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ i: voxel[0], j: voxel[1], k: voxel[2], label }),
    }).then((r) => asJson<ClickResult>(r))
  }

  reset(sessionId: string): Promise<{ t: number }> {
    return fetch(`${this.base}/api/sessions/${sessionId}/reset`, { method: 'POST' }).then((r) =>
      asJson<{ t: number }>(r),
    )
  }

  metrics(sessionId: string): Promise<{ rows: MetricRow[] }> {
    return fetch(`${this.base}/api/sessions/${sessionId}/metrics`).then((r) =>
      asJson<{ rows: MetricRow[] }>(r),
    )
  }
}
