/** Typed client for the consent service. Pure pass-through: no local authority. */

import type {
  AuditResponse,
  CaseView,
  DeviceList,
  LoginResponse,
  OutboxEntry,
  PendingResponse,
  Proof,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly errorType: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) init.body = JSON.stringify(body);
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const text = await response.text();
    const parsed = text ? JSON.parse(text) : {};
    if (!response.ok) {
      throw new ApiError(
        response.status,
        String(parsed.error ?? "Error"),
        String(parsed.message ?? response.statusText),
      );
    }
    return parsed as T;
  }

  login(userId: string, password: string): Promise<LoginResponse> {
    return this.request("POST", "/v1/auth/login", { user_id: userId, password });
  }

  pending(patientId: string, ticket: string): Promise<PendingResponse> {
    return this.request(
      "GET",
      `/v1/patients/${patientId}/pending?ticket=${encodeURIComponent(ticket)}`,
    );
  }

  audit(
    patientId: string,
    ticket: string,
    opts: { kinds?: string[]; limit?: number; offset?: number } = {},
  ): Promise<AuditResponse> {
    const params = new URLSearchParams({ ticket });
    if (opts.kinds?.length) params.set("kinds", opts.kinds.join(","));
    if (opts.limit !== undefined) params.set("limit", String(opts.limit));
    if (opts.offset !== undefined) params.set("offset", String(opts.offset));
    return this.request("GET", `/v1/patients/${patientId}/audit?${params}`);
  }

  decide(
    requestId: string,
    responderId: string,
    decision: "approve" | "deny",
    proof: Proof,
  ): Promise<CaseView> {
    return this.request("POST", `/v1/requests/${requestId}/decision`, {
      responder_id: responderId,
      decision,
      proof,
    });
  }

  getRequest(requestId: string): Promise<CaseView> {
    return this.request("GET", `/v1/requests/${requestId}`);
  }

  linkDevice(
    patientId: string,
    device: { device_id: string; kind: string; address?: string; priority: number },
  ): Promise<DeviceList> {
    return this.request("POST", `/v1/patients/${patientId}/devices`, device);
  }

  unlinkDevice(patientId: string, deviceId: string): Promise<DeviceList> {
    return this.request("DELETE", `/v1/patients/${patientId}/devices/${deviceId}`);
  }

  createDelegation(
    patientId: string,
    delegate: string,
    windowStart: number,
    windowEnd: number,
  ): Promise<{ delegation_id: string }> {
    return this.request("POST", `/v1/patients/${patientId}/delegations`, {
      delegate,
      window_start: windowStart,
      window_end: windowEnd,
    });
  }

  revokeDelegation(delegationId: string): Promise<{ revoked: string }> {
    return this.request("DELETE", `/v1/delegations/${delegationId}`);
  }
}

/**
 * Obtains a decision proof for a pending prompt. In production the proof
 * arrives out of band (the prompted device signs it); the dev-mode provider
 * below asks the harness endpoints to stand in for that device.
 */
export interface ProofProvider {
  proofFor(requestId: string, deviceId: string, decision: "approve" | "deny"): Promise<Proof>;
}

export class HarnessProofProvider implements ProofProvider {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  async proofFor(
    requestId: string,
    deviceId: string,
    decision: "approve" | "deny",
  ): Promise<Proof> {
    const outboxResponse = await this.fetchImpl(
      `${this.baseUrl}/v1/harness/outbox?request_id=${encodeURIComponent(requestId)}`,
    );
    const { outbox } = (await outboxResponse.json()) as { outbox: OutboxEntry[] };
    const entry = outbox.filter((e) => e.device_id === deviceId).at(-1);
    if (!entry) throw new Error(`no prompt delivered to ${deviceId}`);
    if (entry.kind === "smartphone_push") {
      const proofResponse = await this.fetchImpl(`${this.baseUrl}/v1/harness/push-proof`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ request_id: requestId, device_id: deviceId, decision }),
      });
      return (await proofResponse.json()) as Proof;
    }
    const kind = entry.kind === "hardware_token"
      ? "otp_code"
      : entry.kind === "sms"
        ? "sms_reply_code"
        : "voice_keypress";
    return { kind, payload: entry.payload.reply_code ?? "", device_id: deviceId };
  }
}
