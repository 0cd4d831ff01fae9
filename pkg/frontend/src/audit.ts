/**
 * Audit trail view model: paginated, filterable by event kind, with
 * emergency-override rows flagged so they stand out.
 */

import type { ApiClient } from "./api.js";
import type { AuditEvent } from "./types.js";

export const EVENT_KINDS = [
  "auth_ok",
  "auth_fail",
  "acl_pass",
  "acl_fail",
  "dispatched",
  "decision",
  "duplicate_decision",
  "timeout",
  "grant_issued",
  "grant_checked",
  "break_glass",
  "email_queued",
  "email_sent",
  "delegation_created",
  "delegation_revoked",
  "device_linked",
  "device_unlinked",
  "record_read",
  "record_written",
] as const;

export interface AuditRowView {
  seq: number;
  at: string;
  actorId: string;
  actorRole: string;
  eventKind: string;
  requestId: string | null;
  emergency: boolean;
  justification: string | null;
  summary: string;
}

export interface AuditPageView {
  total: number;
  offset: number;
  limit: number;
  pageCount: number;
  rows: AuditRowView[];
}

export function toRow(event: AuditEvent): AuditRowView {
  const emergency = event.event_kind === "break_glass";
  const justification = emergency ? String(event.detail.justification ?? "") : null;
  const parts = Object.entries(event.detail)
    .map(([k, v]) => `${k}=${Array.isArray(v) ? v.join("+") : String(v)}`)
    .join(" ");
  return {
    seq: event.seq,
    at: event.at,
    actorId: event.actor_id,
    actorRole: event.actor_role,
    eventKind: event.event_kind,
    requestId: event.request_id,
    emergency,
    justification,
    summary: parts,
  };
}

export class AuditViewer {
  offset = 0;
  limit = 25;
  kinds: string[] = [];

  constructor(
    private readonly api: ApiClient,
    private readonly patientId: string,
    private readonly ticket: string,
  ) {}

  async load(): Promise<AuditPageView> {
    const response = await this.api.audit(this.patientId, this.ticket, {
      kinds: this.kinds,
      limit: this.limit,
      offset: this.offset,
    });
    return {
      total: response.total,
      offset: this.offset,
      limit: this.limit,
      pageCount: Math.max(1, Math.ceil(response.total / this.limit)),
      rows: response.events.map(toRow),
    };
  }

  async nextPage(): Promise<AuditPageView> {
    this.offset += this.limit;
    const page = await this.load();
    if (this.offset >= page.total && page.total > 0) {
      this.offset = Math.floor((page.total - 1) / this.limit) * this.limit;
      return this.load();
    }
    return page;
  }

  async prevPage(): Promise<AuditPageView> {
    this.offset = Math.max(0, this.offset - this.limit);
    return this.load();
  }

  async setKinds(kinds: string[]): Promise<AuditPageView> {
    this.kinds = kinds;
    this.offset = 0;
    return this.load();
  }
}
