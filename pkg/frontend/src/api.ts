// Thin typed wrappers over the gateway's REST endpoints.

import type { AlertDoc, MapDoc, NodeSnapshotDoc } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: Record<string, unknown>,
  ) {
    super(typeof body.error === "string" ? body.error : `HTTP ${status}`);
  }
}

async function asJson(resp: Response): Promise<unknown> {
  const body = (await resp.json().catch(() => ({}))) as Record<string, unknown>;
  if (!resp.ok) throw new ApiError(resp.status, body);
  return body;
}

export async function fetchNodes(base: string): Promise<NodeSnapshotDoc[]> {
  return (await asJson(await fetch(`${base}/nodes`))) as NodeSnapshotDoc[];
}

export async function fetchMap(base: string): Promise<MapDoc> {
  return (await asJson(await fetch(`${base}/map`))) as MapDoc;
}

export async function fetchAlerts(base: string, active?: boolean): Promise<AlertDoc[]> {
  const suffix = active === undefined ? "" : `?active=${active}`;
  return (await asJson(await fetch(`${base}/alerts${suffix}`))) as AlertDoc[];
}

export async function ackAlert(base: string, alertId: string, operatorId: string): Promise<AlertDoc> {
  const resp = await fetch(`${base}/alerts/${alertId}/ack`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ operator_id: operatorId }),
  });
  return (await asJson(resp)) as AlertDoc;
}

export async function putThresholds(
  base: string,
  nodeId: string,
  fields: Partial<{ set_limit_flow_lpm: number; fill_threshold_cm: number; gas_threshold_ppm: number }>,
): Promise<NodeSnapshotDoc> {
  const resp = await fetch(`${base}/nodes/${nodeId}/thresholds`, {
    method: "PUT",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(fields),
  });
  return (await asJson(resp)) as NodeSnapshotDoc;
}
