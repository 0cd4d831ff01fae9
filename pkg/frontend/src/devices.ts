/**
 * Device and delegation management view model. Unlinking a device and
 * revoking a delegation are destructive and require confirmation; server
 * validation errors are surfaced verbatim for inline display.
 */

import { ApiError, type ApiClient } from "./api.js";
import type { ConfirmFn } from "./inbox.js";

export interface DeviceForm {
  deviceId: string;
  kind: string;
  address: string;
  priority: number;
}

export interface ActionResult {
  ok: boolean;
  devices?: string[];
  delegationId?: string;
  error?: string;
}

export class DeviceManager {
  constructor(
    private readonly api: ApiClient,
    private readonly patientId: string,
    private readonly confirm: ConfirmFn,
  ) {}

  async link(form: DeviceForm): Promise<ActionResult> {
    try {
      const response = await this.api.linkDevice(this.patientId, {
        device_id: form.deviceId,
        kind: form.kind,
        address: form.address,
        priority: form.priority,
      });
      return { ok: true, devices: response.devices };
    } catch (err) {
      return failure(err);
    }
  }

  /** Returns null if the patient backs out of the confirmation. */
  async unlink(deviceId: string): Promise<ActionResult | null> {
    const ok = await this.confirm(`Unlink device ${deviceId}? It will stop receiving prompts.`);
    if (!ok) return null;
    try {
      const response = await this.api.unlinkDevice(this.patientId, deviceId);
      return { ok: true, devices: response.devices };
    } catch (err) {
      return failure(err);
    }
  }

  async delegate(delegate: string, windowStart: number, windowEnd: number): Promise<ActionResult> {
    try {
      const response = await this.api.createDelegation(
        this.patientId,
        delegate,
        windowStart,
        windowEnd,
      );
      return { ok: true, delegationId: response.delegation_id };
    } catch (err) {
      return failure(err);
    }
  }

  /** Returns null if the patient backs out of the confirmation. */
  async revoke(delegationId: string): Promise<ActionResult | null> {
    const ok = await this.confirm(
      `Revoke delegation ${delegationId}? The delegate loses answering rights immediately.`,
    );
    if (!ok) return null;
    try {
      const response = await this.api.revokeDelegation(delegationId);
      return { ok: true, delegationId: response.revoked };
    } catch (err) {
      return failure(err);
    }
  }
}

function failure(err: unknown): ActionResult {
  if (err instanceof ApiError) return { ok: false, error: err.message };
  return { ok: false, error: err instanceof Error ? err.message : String(err) };
}
