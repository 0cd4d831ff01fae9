/**
 * DOM wiring for the patient console. Thin by design: all behaviour lives
 * in the view-model modules so it can be tested without a browser.
 */

import { ApiClient, HarnessProofProvider } from "./api.js";
import { AuditViewer, type AuditPageView } from "./audit.js";
import { DeviceManager } from "./devices.js";
import { Inbox, type PendingRequestView } from "./inbox.js";
import { Poller, type PollState } from "./poller.js";

const BASE_URL = (window as unknown as { CONSOLE_BASE_URL?: string }).CONSOLE_BASE_URL ?? "";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function textInput(id: string): string {
  return (el(id) as HTMLInputElement).value.trim();
}

const api = new ApiClient(BASE_URL);
const proofs = new HarnessProofProvider(BASE_URL);
const confirmFn = (message: string) => window.confirm(message);

let inbox: Inbox | null = null;
let auditViewer: AuditViewer | null = null;
let deviceManager: DeviceManager | null = null;
let poller: Poller<PendingRequestView[]> | null = null;

function renderInbox(state: PollState<PendingRequestView[]>): void {
  el("stale-banner").hidden = !state.stale;
  const list = el("inbox-list");
  list.replaceChildren();
  for (const entry of state.data ?? []) {
    const card = document.createElement("div");
    card.className = "card";
    const text = document.createElement("p");
    text.textContent =
      `${entry.requesterDisplay} (${entry.requesterRole}) asks to ${entry.action} ` +
      `${entry.sections.join(", ")} for ${entry.purpose}. Expires in ${entry.countdown}.`;
    const approve = document.createElement("button");
    approve.textContent = "Approve";
    approve.onclick = () => void inbox?.approve(entry).then(() => poller?.tick());
    const deny = document.createElement("button");
    deny.textContent = "Deny";
    deny.onclick = () => void inbox?.deny(entry).then(() => poller?.tick());
    card.append(text, approve, deny);
    list.append(card);
  }
}

function renderAudit(page: AuditPageView): void {
  const body = el("audit-rows");
  body.replaceChildren();
  for (const row of page.rows) {
    const tr = document.createElement("tr");
    if (row.emergency) tr.className = "emergency";
    for (const cell of [
      String(row.seq),
      row.at,
      `${row.actorId} (${row.actorRole})`,
      row.eventKind + (row.emergency ? ` [EMERGENCY: ${row.justification}]` : ""),
      row.summary,
    ]) {
      const td = document.createElement("td");
      td.textContent = cell;
      tr.append(td);
    }
    body.append(tr);
  }
  el("audit-page").textContent =
    `${page.offset + 1}-${Math.min(page.offset + page.limit, page.total)} of ${page.total}`;
}

el("login-form").onsubmit = async (event) => {
  event.preventDefault();
  const patientId = textInput("login-patient");
  try {
    const session = await api.login(patientId, textInput("login-password"));
    inbox = new Inbox(api, proofs, patientId, session.ticket_id, confirmFn);
    auditViewer = new AuditViewer(api, patientId, session.ticket_id);
    deviceManager = new DeviceManager(api, patientId, confirmFn);
    poller = new Poller(() => inbox!.load(), renderInbox);
    poller.start();
    el("console").hidden = false;
    el("login-error").textContent = "";
    renderAudit(await auditViewer.load());
  } catch (err) {
    el("login-error").textContent = err instanceof Error ? err.message : String(err);
  }
};

el("audit-next").onclick = async () => {
  if (auditViewer) renderAudit(await auditViewer.nextPage());
};
el("audit-prev").onclick = async () => {
  if (auditViewer) renderAudit(await auditViewer.prevPage());
};
el("audit-filter").onchange = async (event) => {
  const value = (event.target as HTMLSelectElement).value;
  if (auditViewer) renderAudit(await auditViewer.setKinds(value ? [value] : []));
};

el("device-link").onclick = async () => {
  if (!deviceManager) return;
  const result = await deviceManager.link({
    deviceId: textInput("device-id"),
    kind: textInput("device-kind"),
    address: textInput("device-address"),
    priority: Number(textInput("device-priority")),
  });
  el("device-error").textContent = result.ok ? "" : result.error ?? "";
};

el("device-unlink").onclick = async () => {
  if (!deviceManager) return;
  const result = await deviceManager.unlink(textInput("device-id"));
  if (result) el("device-error").textContent = result.ok ? "" : result.error ?? "";
};

el("delegation-create").onclick = async () => {
  if (!deviceManager) return;
  const result = await deviceManager.delegate(
    textInput("delegate-id"),
    Date.parse(textInput("delegate-start")),
    Date.parse(textInput("delegate-end")),
  );
  el("delegation-error").textContent = result.ok ? "" : result.error ?? "";
};

el("delegation-revoke").onclick = async () => {
  if (!deviceManager) return;
  const result = await deviceManager.revoke(textInput("delegation-id"));
  if (result) el("delegation-error").textContent = result.ok ? "" : result.error ?? "";
};
