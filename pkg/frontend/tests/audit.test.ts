import { describe, expect, it, vi } from "vitest";
import type { ApiClient } from "../src/api.js";
import { AuditViewer, toRow } from "../src/audit.js";
import type { AuditEvent } from "../src/types.js";

function event(seq: number, kind: string, detail: Record<string, unknown> = {}): AuditEvent {
  return {
    seq,
    at: "1970-01-01T00:00:01.000Z",
    actor_id: "dr-lee",
    actor_role: "gp",
    event_kind: kind,
    request_id: "req-000001",
    detail,
  };
}

describe("toRow", () => {
  it("flags emergency overrides and surfaces the justification", () => {
    const row = toRow(event(5, "break_glass", { justification: "patient unconscious" }));
    expect(row.emergency).toBe(true);
    expect(row.justification).toBe("patient unconscious");
  });

  it("leaves ordinary events unflagged", () => {
    const row = toRow(event(1, "decision", { decision: "approve" }));
    expect(row.emergency).toBe(false);
    expect(row.justification).toBeNull();
    expect(row.summary).toBe("decision=approve");
  });
});

describe("AuditViewer pagination", () => {
  function makeApi(total: number): ApiClient {
    const all = Array.from({ length: total }, (_, i) => event(i + 1, "dispatched"));
    return {
      audit: vi.fn(async (_p: string, _t: string, opts: { kinds?: string[]; limit?: number; offset?: number }) => {
        const matching = opts.kinds?.length
          ? all.filter((e) => opts.kinds!.includes(e.event_kind))
          : all;
        return {
          total: matching.length,
          events: matching.slice(opts.offset ?? 0, (opts.offset ?? 0) + (opts.limit ?? 500)),
        };
      }),
    } as unknown as ApiClient;
  }

  it("reports the server total and page count", async () => {
    const viewer = new AuditViewer(makeApi(60), "pat-amy", "tkt");
    const page = await viewer.load();
    expect(page.total).toBe(60);
    expect(page.pageCount).toBe(3);
    expect(page.rows).toHaveLength(25);
    expect(page.rows[0].seq).toBe(1);
  });

  it("walks forward and backward through pages", async () => {
    const viewer = new AuditViewer(makeApi(60), "pat-amy", "tkt");
    await viewer.load();
    const second = await viewer.nextPage();
    expect(second.rows[0].seq).toBe(26);
    const third = await viewer.nextPage();
    expect(third.rows).toHaveLength(10);
    const clamped = await viewer.nextPage();
    expect(clamped.offset).toBe(50);
    const back = await viewer.prevPage();
    expect(back.rows[0].seq).toBe(26);
  });

  it("resets the offset when the kind filter changes", async () => {
    const viewer = new AuditViewer(makeApi(60), "pat-amy", "tkt");
    await viewer.load();
    await viewer.nextPage();
    const filtered = await viewer.setKinds(["break_glass"]);
    expect(filtered.offset).toBe(0);
    expect(filtered.total).toBe(0);
  });
});
