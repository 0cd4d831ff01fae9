/** Wire types for the /v1 endpoint surface the console consumes. */

export interface LoginResponse {
  ticket_id: string;
  principal_id: string;
  expires_at: string;
}

export interface PendingRequest {
  request_id: string;
  requester: string;
  requester_display: string;
  requester_role: string;
  purpose: string;
  sections: string[];
  action: string;
  patient: string;
  device_id: string | null;
  deadline: string | null;
  remaining_ms: number;
}

export interface PendingResponse {
  pending: PendingRequest[];
}

export interface AuditEvent {
  seq: number;
  at: string;
  actor_id: string;
  actor_role: string;
  event_kind: string;
  request_id: string | null;
  detail: Record<string, unknown>;
}

export interface AuditResponse {
  total: number;
  events: AuditEvent[];
}

export interface Proof {
  kind: string;
  payload: string;
  device_id: string;
}

export interface CaseView {
  request_id: string;
  state: string;
  requester: string;
  patient: string;
  sections: string[];
  action: string;
  purpose: string;
  category: string;
  deadline: string | null;
  history: { event: string; at: string }[];
  grant_id?: string;
}

export interface DeviceList {
  devices: string[];
}

export interface OutboxEntry {
  request_id: string;
  device_id: string;
  kind: string;
  attempt: number;
  sent_at: number;
  payload: Record<string, string>;
}
