/**
 * End-to-end: drives the headless session controller against the real
 * HTTP service running a toy checkpoint. Mirrors the interactive flow:
 * create session, two clicks, slider change, undo, reset; the marker
 * list must match the server after every step and each interaction
 * must complete within the 2 s interactivity budget.
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { ApiClient } from "./api.js";
import { AnnotationSession } from "./session.js";
import { rleEncode, rleDecode } from "./rle.js";

const PORT = 8471;
const BASE = `http://127.0.0.1:${PORT}`;
const INTERACTION_BUDGET_MS = 2000;

let server: ChildProcess | null = null;
let workDir = "";
let imageBase64 = "";

function prepareAssets(dir: string): void {
  const script = `
import base64, io
import numpy as np
from PIL import Image as PILImage
from grainseg.model import SegmenterConfig, build_segmenter, save_checkpoint

config = SegmenterConfig(patch_size=8, embed_dim=32, depth=2, num_heads=2, image_size=32)
save_checkpoint(build_segmenter(config, seed=0), r"${dir}/toy.pt")
rng = np.random.default_rng(0)
arr = (rng.uniform(0, 1, size=(32, 32, 3)) * 255).astype("uint8")
buf = io.BytesIO()
PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
open(r"${dir}/image.b64", "w").write(base64.b64encode(buf.getvalue()).decode())
`;
  const result = spawnSync("python3", ["-c", script], { encoding: "utf-8" });
  if (result.status !== 0) {
    throw new Error(`asset preparation failed: ${result.stderr}`);
  }
}

async function waitForServer(timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const resp = await fetch(`${BASE}/sessions/probe`);
      if (resp.status === 404) return; // server answering
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error("service did not come up in time");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "grainseg-e2e-"));
  prepareAssets(workDir);
  imageBase64 = readFileSync(join(workDir, "image.b64"), "utf-8").trim();
  server = spawn(
    "python3",
    ["-m", "grainseg.cli", "serve", "--ckpt", join(workDir, "toy.pt"), "--port", String(PORT)],
    { stdio: "ignore" },
  );
  await waitForServer();
}, 60_000);

afterAll(() => {
  server?.kill();
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("annotation flow against the live service", () => {
  it("create -> 2 clicks -> slider -> undo -> reset, mirroring the server", async () => {
    const api = new ApiClient(BASE);
    const session = new AnnotationSession(api);

    await session.start(imageBase64);
    expect(session.sessionId).not.toBeNull();
    expect(session.h).toBe(32);
    expect(session.w).toBe(32);

    const step = async (action: () => Promise<void>) => {
      const t0 = Date.now();
      await action();
      await session.idle();
      expect(Date.now() - t0).toBeLessThan(INTERACTION_BUDGET_MS);
      expect(await session.verifyMirror()).toBe(true);
    };

    await step(() => session.click(16, 16, "positive"));
    expect(session.mask).not.toBeNull();
    const maskAfterOne = Uint8Array.from(session.mask!);

    await step(() => session.click(8, 24, "negative"));
    expect(session.markers).toHaveLength(2);

    await step(() => session.setGranularity(0.31));
    expect(session.granularity).toBeCloseTo(0.3); // snapped to the active bin

    await step(() => session.undo());
    expect(session.markers).toHaveLength(1);

    // the served mask round-trips through the client codec
    const reencoded = rleEncode(session.mask!, session.h, session.w);
    expect(Array.from(rleDecode(reencoded))).toEqual(Array.from(session.mask!));

    await step(() => session.reset());
    expect(session.markers).toHaveLength(0);
    expect(session.mask).toBeNull();

    // undo after reset equals a fresh replay: re-click and compare masks
    await step(() => session.setGranularity(1.0));
    await step(() => session.click(16, 16, "positive"));
    expect(Array.from(session.mask!)).toEqual(Array.from(maskAfterOne));

    await api.deleteSession(session.sessionId!);
  }, 60_000);
});
