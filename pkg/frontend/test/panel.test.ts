import { describe, expect, it } from "vitest";

import { applyView, buildPanel, LAYOUT } from "../src/panel.js";
import { svgMarkup } from "../src/diagram.js";
import { Snapshot } from "../src/types.js";

const NOMINAL: Record<string, [number, number]> = {
  RTU_01: [113.91, 23.18], RTU_02: [83.91, 23.18], RTU_03: [43.91, 23.18],
  RTU_04: [11.39, 23.18], RTU_05: [6.89, 23.18], RTU_06: [3.0, 23.18],
  RTU_07: [0, 23.18], RTU_08: [0, 23.18], RTU_09: [50.0, 23.18],
  RTU_10: [120.0, 23.18], RTU_11: [180.76, 23.18],
};

function nominalSnapshot(): Snapshot {
  const rtus: Snapshot["rtus"] = {};
  for (const [rtu, [current, voltage]] of Object.entries(NOMINAL)) {
    rtus[rtu] = {
      current, voltage,
      breaker: rtu === "RTU_07" || rtu === "RTU_08" ? "open" : "closed",
      stale_for: 0.2,
    };
  }
  return { t: 10, rtus };
}

function glyph(model: ReturnType<typeof buildPanel>, rtu: string) {
  const found = model.glyphs.find((g) => g.rtu === rtu);
  if (!found) throw new Error(`no glyph for ${rtu}`);
  return found;
}

describe("panel under nominal state", () => {
  const model = buildPanel(nominalSnapshot());

  it("covers every RTU in the layout", () => {
    expect(model.glyphs.length).toBe(11);
    expect(new Set(LAYOUT.map((e) => e.rtu)).size).toBe(11);
  });

  it("shows the head current and voltage to two decimals", () => {
    expect(glyph(model, "RTU_01").currentLabel).toBe("113.91 A");
    expect(glyph(model, "RTU_01").voltageLabel).toBe("23.18 kV");
    expect(glyph(model, "RTU_11").currentLabel).toBe("180.76 A");
    expect(glyph(model, "RTU_11").voltageLabel).toBe("23.18 kV");
  });

  it("only line heads carry a voltage label", () => {
    const withVoltage = model.glyphs.filter((g) => g.voltageLabel !== null);
    expect(withVoltage.map((g) => g.rtu).sort()).toEqual(["RTU_01", "RTU_11"]);
  });

  it("renders tie switches open and their ties de-energized", () => {
    for (const rtu of ["RTU_07", "RTU_08"]) {
      expect(glyph(model, rtu).breaker).toBe("open");
      expect(glyph(model, rtu).energized).toBe(false);
      expect(glyph(model, rtu).currentLabel).toBeNull();
    }
  });

  it("colors every feeder segment energized", () => {
    for (const rtu of ["RTU_01", "RTU_02", "RTU_03", "RTU_04", "RTU_05",
                       "RTU_06", "RTU_09", "RTU_10", "RTU_11"]) {
      expect(glyph(model, rtu).energized).toBe(true);
      expect(glyph(model, rtu).stale).toBe(false);
    }
  });
});

describe("panel under the blinded top line", () => {
  // what the console receives while measurement responses read zero
  const snapshot = nominalSnapshot();
  for (const rtu of ["RTU_01", "RTU_02", "RTU_03", "RTU_04", "RTU_05", "RTU_06"]) {
    snapshot.rtus[rtu] = { ...snapshot.rtus[rtu], current: 0, voltage: 0 };
  }
  const model = buildPanel(snapshot);

  it("shows 0.00 kV at the head of the top line", () => {
    expect(glyph(model, "RTU_01").voltageLabel).toBe("0.00 kV");
  });

  it("drops the current labels along the top line", () => {
    for (const rtu of ["RTU_02", "RTU_03", "RTU_04", "RTU_05", "RTU_06"]) {
      expect(glyph(model, rtu).currentLabel).toBeNull();
    }
  });

  it("paints the whole top line white and leaves the bottom energized", () => {
    for (const rtu of ["RTU_01", "RTU_02", "RTU_03", "RTU_04", "RTU_05", "RTU_06"]) {
      expect(glyph(model, rtu).energized).toBe(false);
    }
    for (const rtu of ["RTU_09", "RTU_10", "RTU_11"]) {
      expect(glyph(model, rtu).energized).toBe(true);
    }
  });

  it("puts the white class on the dead segments in the markup", () => {
    const svg = svgMarkup(model, true);
    expect(svg).toContain("0.00 kV");
    expect(svg.match(/line dead/g)?.length).toBe(6 + 2); // top line + both ties
    expect(svg.match(/line energized/g)?.length).toBe(3);
  });
});

describe("panel with missing data", () => {
  it("marks never-polled RTUs stale and label-free", () => {
    const model = buildPanel({ t: 0, rtus: {} });
    for (const g of model.glyphs) {
      expect(g.stale).toBe(true);
      expect(g.currentLabel).toBeNull();
      expect(g.voltageLabel).toBeNull();
      expect(g.breaker).toBe("unknown");
    }
  });

  it("marks timed-out RTUs stale without inventing values", () => {
    const snapshot = nominalSnapshot();
    snapshot.rtus.RTU_03 = {
      current: null, voltage: null, breaker: "unknown", stale_for: 12.5,
    };
    const g = buildPanel(snapshot).glyphs.find((x) => x.rtu === "RTU_03")!;
    expect(g.stale).toBe(true);
    expect(g.currentLabel).toBeNull();
    expect(g.energized).toBe(false);
  });
});

describe("view deltas", () => {
  it("merges into the snapshot without touching other RTUs", () => {
    const before = nominalSnapshot();
    const after = applyView(before, {
      t: 11, rtu: "RTU_01", current: 0, voltage: 0, breaker: "closed",
    });
    expect(after.rtus.RTU_01.current).toBe(0);
    expect(after.rtus.RTU_02).toEqual(before.rtus.RTU_02);
    expect(before.rtus.RTU_01.current).toBe(113.91); // input untouched
  });
});
