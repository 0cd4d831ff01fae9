/**
 * End-to-end: spawns the real consent service in harness mode, seeds it,
 * and drives the console view models against live HTTP.
 */

import { type ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient, HarnessProofProvider } from "../src/api.js";
import { AuditViewer } from "../src/audit.js";
import { Inbox } from "../src/inbox.js";
import { Poller } from "../src/poller.js";
import type { PendingRequestView } from "../src/inbox.js";

const PORT = 18640 + (process.pid % 100);
const BASE = `http://127.0.0.1:${PORT}`;

const SEED = {
  principals: [
    { id: "dr-lee", display_name: "Dr Lee", role: "gp", password: "pw" },
  ],
  patients: [
    {
      id: "pat-amy",
      display_name: "Amy",
      password: "amy-pw",
      email: "amy@example.test",
      devices: [
        { device_id: "amy-phone", kind: "smartphone_push", address: "tok", priority: 1 },
      ],
    },
  ],
  records: [{ patient: "pat-amy", section: "medications", text: "aspirin 100mg" }],
};

let server: ChildProcess;
const api = new ApiClient(BASE);
const proofs = new HarnessProofProvider(BASE);

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 100; i++) {
    try {
      await fetch(`${BASE}/v1/auth/login`, { method: "POST", body: "{}" });
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 200));
    }
  }
  throw new Error("service never came up");
}

beforeAll(async () => {
  const dataDir = mkdtempSync(join(tmpdir(), "console-e2e-"));
  const seedPath = join(dataDir, "seed.json");
  const configPath = join(dataDir, "config.json");
  writeFileSync(seedPath, JSON.stringify(SEED));
  writeFileSync(
    configPath,
    JSON.stringify({
      data_dir: join(dataDir, "state"),
      listen_address: `127.0.0.1:${PORT}`,
      clock_mode: "simulated",
      harness: true,
    }),
  );
  await new Promise<void>((resolve, reject) => {
    const seeder = spawn("consentgate", ["seed", "--fixture", seedPath, "--data-dir", join(dataDir, "state")]);
    seeder.on("exit", (code) => (code === 0 ? resolve() : reject(new Error(`seed exited ${code}`))));
  });
  server = spawn("consentgate", ["serve", "--config", configPath], { stdio: "ignore" });
  await waitForServer();
}, 60_000);

afterAll(() => {
  server?.kill();
});

describe("patient console against the live service", () => {
  let ticket: string;
  let inbox: Inbox;

  it("signs the patient in with their portal credentials", async () => {
    const session = await api.login("pat-amy", "amy-pw");
    expect(session.principal_id).toBe("pat-amy");
    ticket = session.ticket_id;
    inbox = new Inbox(api, proofs, "pat-amy", ticket, () => true);
  });

  it("shows a clinician request in the inbox within one poll interval", async () => {
    const clinician = await api.login("dr-lee", "pw");
    const submitted = await fetch(`${BASE}/v1/requests`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        ticket_id: clinician.ticket_id,
        patient_id: "pat-amy",
        sections: ["medications"],
        action: "read",
        purpose: "consultation",
      }),
    });
    expect(submitted.status).toBe(200);

    const poller = new Poller<PendingRequestView[]>(() => inbox.load(), () => {}, 3000);
    const state = await poller.tick();
    expect(state.stale).toBe(false);
    const views = state.data ?? [];
    expect(views).toHaveLength(1);
    expect(views[0].requesterDisplay).toBe("Dr Lee");
    expect(views[0].sections).toEqual(["medications"]);
    expect(views[0].deviceId).toBe("amy-phone");
  });

  it("approve from the inbox produces a grant and an auditable decision", async () => {
    const views = await inbox.load();
    const result = await inbox.approve(views[0]);
    expect(result.state).toBe("Approved");
    expect(result.grant_id).toBeTruthy();

    const viewer = new AuditViewer(api, "pat-amy", ticket);
    const page = await viewer.setKinds(["decision"]);
    expect(page.total).toBeGreaterThanOrEqual(1);
    expect(page.rows.at(-1)?.summary).toContain("decision=approve");
    const grants = await viewer.setKinds(["grant_issued"]);
    expect(grants.total).toBeGreaterThanOrEqual(1);

    expect((await inbox.load())).toHaveLength(0);
  });

  it("renders an emergency override flagged with its justification", async () => {
    const clinician = await api.login("dr-lee", "pw");
    const submitted = await fetch(`${BASE}/v1/requests`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        ticket_id: clinician.ticket_id,
        patient_id: "pat-amy",
        sections: ["medications"],
        action: "read",
        purpose: "emergency_treatment",
        declared_emergency: true,
        justification: "patient unconscious in ED",
      }),
    });
    const caseView = await submitted.json();
    if (caseView.state !== "EmergencyGranted") {
      const response = await fetch(`${BASE}/v1/requests/${caseView.request_id}/break-glass`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({
          ticket_id: clinician.ticket_id,
          justification: "patient unconscious in ED",
        }),
      });
      expect(response.status).toBe(200);
    }

    const viewer = new AuditViewer(api, "pat-amy", ticket);
    const page = await viewer.setKinds(["break_glass"]);
    expect(page.total).toBeGreaterThanOrEqual(1);
    const row = page.rows.at(-1)!;
    expect(row.emergency).toBe(true);
    expect(row.justification).toContain("patient unconscious");
  });
});
