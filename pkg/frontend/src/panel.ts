/**
 * Panel model: a pure function from the latest snapshot to what the
 * single-line diagram should show.
 *
 * Layout follows the feeder it monitors: the substation on the right feeds
 * a top line (RTU_01..RTU_06) and a bottom line (RTU_11, RTU_10, RTU_09),
 * with two normally open tie switches (RTU_07 between the line ends,
 * RTU_08 mid-line). Each RTU owns the line segment it feeds: the segment
 * is drawn energized while the displayed current is above zero and white
 * once it is not. Current labels sit below each RTU and disappear when the
 * displayed current is zero; the two line heads also carry a voltage label
 * which stays visible even at 0.00 kV.
 */

import { BreakerState, RtuState, Snapshot } from "./types.js";

/** A poll this old (seconds) greys the glyph out. */
export const STALE_AFTER_S = 5;

export interface LayoutEntry {
  rtu: string;
  x: number;
  y: number;
  /** Line segment the RTU feeds, drawn from its upstream neighbour. */
  segment: { x1: number; y1: number; x2: number; y2: number };
  /** Heads of the two lines show kilovolts next to the glyph. */
  head?: boolean;
  tie?: boolean;
}

const TOP_Y = 100;
const BOT_Y = 270;

export const LAYOUT: LayoutEntry[] = [
  // top line, substation at x=930 feeding leftwards
  { rtu: "RTU_01", x: 810, y: TOP_Y, head: true,
    segment: { x1: 905, y1: TOP_Y, x2: 810, y2: TOP_Y } },
  { rtu: "RTU_02", x: 680, y: TOP_Y,
    segment: { x1: 810, y1: TOP_Y, x2: 680, y2: TOP_Y } },
  { rtu: "RTU_03", x: 550, y: TOP_Y,
    segment: { x1: 680, y1: TOP_Y, x2: 550, y2: TOP_Y } },
  { rtu: "RTU_04", x: 420, y: TOP_Y,
    segment: { x1: 550, y1: TOP_Y, x2: 420, y2: TOP_Y } },
  { rtu: "RTU_05", x: 290, y: TOP_Y,
    segment: { x1: 420, y1: TOP_Y, x2: 290, y2: TOP_Y } },
  { rtu: "RTU_06", x: 160, y: TOP_Y,
    segment: { x1: 290, y1: TOP_Y, x2: 160, y2: TOP_Y } },
  // bottom line
  { rtu: "RTU_11", x: 810, y: BOT_Y, head: true,
    segment: { x1: 905, y1: BOT_Y, x2: 810, y2: BOT_Y } },
  { rtu: "RTU_10", x: 550, y: BOT_Y,
    segment: { x1: 810, y1: BOT_Y, x2: 550, y2: BOT_Y } },
  { rtu: "RTU_09", x: 160, y: BOT_Y,
    segment: { x1: 550, y1: BOT_Y, x2: 160, y2: BOT_Y } },
  // ties, normally open: RTU_07 joins the far ends, RTU_08 joins mid-line
  { rtu: "RTU_07", x: 100, y: 185, tie: true,
    segment: { x1: 100, y1: TOP_Y, x2: 100, y2: BOT_Y } },
  { rtu: "RTU_08", x: 490, y: 185, tie: true,
    segment: { x1: 490, y1: TOP_Y, x2: 490, y2: BOT_Y } },
];

export interface PanelGlyph {
  rtu: string;
  x: number;
  y: number;
  tie: boolean;
  segment: { x1: number; y1: number; x2: number; y2: number };
  energized: boolean;
  breaker: BreakerState;
  /** e.g. "113.91 A"; null when unknown or when the line is dead. */
  currentLabel: string | null;
  /** e.g. "23.18 kV"; line heads only, shown even when zero. */
  voltageLabel: string | null;
  stale: boolean;
}

export interface PanelModel {
  t: number;
  glyphs: PanelGlyph[];
}

function fmt(value: number): string {
  return value.toFixed(2);
}

function glyphFor(entry: LayoutEntry, state: RtuState | undefined): PanelGlyph {
  const current = state?.current ?? null;
  const voltage = state?.voltage ?? null;
  const staleFor = state?.stale_for;
  return {
    rtu: entry.rtu,
    x: entry.x,
    y: entry.y,
    tie: entry.tie ?? false,
    segment: entry.segment,
    energized: current !== null && current > 0,
    breaker: state?.breaker ?? "unknown",
    currentLabel: current !== null && current > 0 ? `${fmt(current)} A` : null,
    voltageLabel: entry.head && voltage !== null ? `${fmt(voltage)} kV` : null,
    stale: state === undefined || current === null ||
      staleFor == null || staleFor > STALE_AFTER_S,
  };
}

export function buildPanel(snapshot: Snapshot): PanelModel {
  return {
    t: snapshot.t,
    glyphs: LAYOUT.map((entry) => glyphFor(entry, snapshot.rtus[entry.rtu])),
  };
}

/** Apply a single view delta to a snapshot, returning a new snapshot. */
export function applyView(
  snapshot: Snapshot,
  event: { t: number; rtu: string; current: number | null; voltage: number | null; breaker: BreakerState },
): Snapshot {
  const previous = snapshot.rtus[event.rtu] ?? {
    current: null, voltage: null, breaker: "unknown" as BreakerState,
  };
  return {
    t: event.t,
    rtus: {
      ...snapshot.rtus,
      [event.rtu]: {
        ...previous,
        current: event.current,
        voltage: event.voltage,
        breaker: event.breaker,
        stale_for: event.current === null ? previous.stale_for : 0,
      },
    },
  };
}
