/**
 * SVG markup for the single-line diagram.
 *
 * Pure string building: the markup is a function of the panel model plus
 * the connection flag, nothing else. The DOM layer swaps it in wholesale
 * and attaches one delegated click handler for the breaker glyphs.
 */

import { PanelGlyph, PanelModel } from "./panel.js";

const WIDTH = 1000;
const HEIGHT = 370;

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function segmentMarkup(glyph: PanelGlyph): string {
  const s = glyph.segment;
  const cls = glyph.energized ? "line energized" : "line dead";
  return `<line class="${cls}" x1="${s.x1}" y1="${s.y1}" ` +
    `x2="${s.x2}" y2="${s.y2}"/>`;
}

function breakerMarkup(glyph: PanelGlyph): string {
  const cls = `breaker ${glyph.breaker}${glyph.stale ? " stale" : ""}`;
  const half = 9;
  const box = `<rect class="${cls}" x="${glyph.x - half}" y="${glyph.y - half}" ` +
    `width="${2 * half}" height="${2 * half}" data-rtu="${esc(glyph.rtu)}"/>`;
  const mark = glyph.breaker === "unknown"
    ? `<text class="breaker-mark" x="${glyph.x}" y="${glyph.y + 4}">?</text>`
    : "";
  return box + mark;
}

function labelsMarkup(glyph: PanelGlyph): string {
  const parts: string[] = [];
  const cls = glyph.stale ? "value stale" : "value";
  parts.push(`<text class="rtu-name" x="${glyph.x}" y="${glyph.y - 16}">` +
    `${esc(glyph.rtu)}</text>`);
  if (glyph.currentLabel !== null) {
    parts.push(`<text class="${cls} current" x="${glyph.x}" ` +
      `y="${glyph.y + 30}">${esc(glyph.currentLabel)}</text>`);
  }
  if (glyph.voltageLabel !== null) {
    parts.push(`<text class="${cls} voltage" x="${glyph.x + 48}" ` +
      `y="${glyph.y - 16}">${esc(glyph.voltageLabel)}</text>`);
  }
  return parts.join("");
}

export function svgMarkup(model: PanelModel, connected: boolean): string {
  const body: string[] = [];
  // substation feeding both lines from the right edge
  body.push(`<rect class="substation" x="905" y="85" width="60" height="200"/>`);
  body.push(`<text class="rtu-name" x="935" y="75">SUB 25 kV</text>`);
  for (const glyph of model.glyphs) {
    body.push(segmentMarkup(glyph));
  }
  for (const glyph of model.glyphs) {
    body.push(breakerMarkup(glyph) + labelsMarkup(glyph));
  }
  const cls = connected ? "diagram" : "diagram disconnected";
  return `<svg class="${cls}" viewBox="0 0 ${WIDTH} ${HEIGHT}" ` +
    `xmlns="http://www.w3.org/2000/svg">${body.join("")}</svg>`;
}
