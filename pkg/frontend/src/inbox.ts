/**
 * Inbox view model: pending consent prompts for one patient, with approve
 * and deny actions. Denial is destructive (the requester is refused) and
 * must be confirmed before it is sent.
 */

import type { ApiClient, ProofProvider } from "./api.js";
import type { CaseView, PendingRequest } from "./types.js";

export interface PendingRequestView {
  requestId: string;
  requesterDisplay: string;
  requesterRole: string;
  purpose: string;
  sections: string[];
  action: string;
  deviceId: string | null;
  deadline: string;
  countdown: string;
}

export function formatCountdown(remainingMs: number): string {
  const total = Math.max(0, Math.floor(remainingMs / 1000));
  const minutes = Math.floor(total / 60);
  const seconds = total % 60;
  return `${minutes}:${String(seconds).padStart(2, "0")}`;
}

export function toView(entry: PendingRequest): PendingRequestView {
  return {
    requestId: entry.request_id,
    requesterDisplay: entry.requester_display,
    requesterRole: entry.requester_role,
    purpose: entry.purpose,
    sections: entry.sections,
    action: entry.action,
    deviceId: entry.device_id,
    deadline: entry.deadline ?? "",
    countdown: formatCountdown(entry.remaining_ms),
  };
}

export type ConfirmFn = (message: string) => boolean | Promise<boolean>;

export class Inbox {
  constructor(
    private readonly api: ApiClient,
    private readonly proofs: ProofProvider,
    private readonly patientId: string,
    private readonly ticket: string,
    private readonly confirm: ConfirmFn,
  ) {}

  async load(): Promise<PendingRequestView[]> {
    const response = await this.api.pending(this.patientId, this.ticket);
    return response.pending.map(toView);
  }

  async approve(entry: PendingRequestView): Promise<CaseView> {
    return this.decide(entry, "approve");
  }

  /** Returns null if the patient backs out of the confirmation. */
  async deny(entry: PendingRequestView): Promise<CaseView | null> {
    const ok = await this.confirm(
      `Deny ${entry.requesterDisplay} access to ${entry.sections.join(", ")}?`,
    );
    if (!ok) return null;
    return this.decide(entry, "deny");
  }

  private async decide(
    entry: PendingRequestView,
    decision: "approve" | "deny",
  ): Promise<CaseView> {
    if (!entry.deviceId) throw new Error("no active device for this request");
    const proof = await this.proofs.proofFor(entry.requestId, entry.deviceId, decision);
    return this.api.decide(entry.requestId, this.patientId, decision, proof);
  }
}
