// Minimal RFC-4180 parsing for rendering downloaded CSVs. The UI never
// computes statistics from these; it only displays what the API produced.

export function parseCsv(text: string): string[][] {
  const rows: string[][] = [];
  let row: string[] = [];
  let cell = "";
  let quoted = false;
  for (let i = 0; i < text.length; i++) {
    const ch = text[i];
    if (quoted) {
      if (ch === '"') {
        if (text[i + 1] === '"') {
          cell += '"';
          i++;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
    } else if (ch === '"') {
      quoted = true;
    } else if (ch === ",") {
      row.push(cell);
      cell = "";
    } else if (ch === "\n" || ch === "\r") {
      if (ch === "\r" && text[i + 1] === "\n") i++;
      row.push(cell);
      rows.push(row);
      row = [];
      cell = "";
    } else {
      cell += ch;
    }
  }
  if (cell !== "" || row.length) {
    row.push(cell);
    rows.push(row);
  }
  return rows.filter((r) => !(r.length === 1 && r[0] === ""));
}

/** Map a correlation value in [-1, 1] to a heat color (chart rendering is the
 * one computation the client owns). */
export function heatColor(r: number | null): string {
  if (r === null || Number.isNaN(r)) return "#f4f4f4";
  const clamped = Math.max(-1, Math.min(1, r));
  const intensity = Math.round(Math.abs(clamped) * 200);
  return clamped >= 0
    ? `rgb(${255 - intensity}, ${255 - Math.round(intensity * 0.4)}, 255)`
    : `rgb(255, ${255 - Math.round(intensity * 0.4)}, ${255 - intensity})`;
}
