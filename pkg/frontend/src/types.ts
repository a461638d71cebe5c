// Document shapes served by the gateway HTTP/SSE API (see docs/config.md
// in the repository root). The dashboard treats these as read-only facts;
// it never derives alert state itself.

export interface SpecDoc {
  pipe_height_cm: number;
  set_limit_flow_lpm: number;
  fill_threshold_cm: number;
  gas_threshold_ppm: number;
}

export interface LatestDoc {
  seq: number;
  timestamp_ms: number;
  flow_lpm: number;
  garbage_level_cm: number;
  gas_ppm: number;
  anomalous: boolean;
  evaluation: "Normal" | "Warning";
}

export interface NodeSnapshotDoc {
  node_id: string;
  spec: SpecDoc;
  position: { lat_deg: number; lon_deg: number };
  latest: LatestDoc | null;
  alert_state: "Normal" | "Raised";
  active_alert_id: string | null;
}

export interface MapFeature {
  type: "Feature";
  geometry: { type: "Point"; coordinates: [number, number] }; // lon, lat
  properties: { node_id: string; state: "GREEN" | "RED"; garbage_level_cm: number | null };
}

export interface MapDoc {
  type: "FeatureCollection";
  features: MapFeature[];
}

export interface AlertDoc {
  alert_id: string;
  node_id: string;
  causes: string[];
  garbage_level_cm: number;
  raised_at_ms: number;
  lat_deg: number;
  lon_deg: number;
  dispatched_to: string;
  dispatch: { delivered: boolean; attempts: number } | null;
  ack: { operator_id: string; at_ms: number } | null;
  cleared_at_ms: number | null;
  active: boolean;
}

// SSE payloads

export interface AlertEventData {
  alert_id: string;
  node_id: string;
  direction: "Raised" | "Cleared";
  causes: string[];
  garbage_level_cm: number;
  lat_deg: number;
  lon_deg: number;
  at_ms: number;
}

export interface SnapshotEventData {
  node_id: string;
  seq: number;
  timestamp_ms: number;
  flow_lpm: number;
  garbage_level_cm: number;
  gas_ppm: number;
  anomalous: boolean;
  evaluation: "Normal" | "Warning";
  alert_state: "Normal" | "Raised";
}

export interface GatewayEvent {
  id?: number;
  event: "alert" | "snapshot" | "resync";
  data: AlertEventData | SnapshotEventData | { reason: string };
}

export type PanelColor = "GREEN" | "RED";

export type ConnectionStatus = "connecting" | "live" | "polling" | "disconnected";
