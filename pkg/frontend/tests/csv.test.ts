import { describe, expect, it } from "vitest";

import { heatColor, parseCsv } from "../src/csv.js";

describe("csv parsing", () => {
  it("parses CRLF output with a header", () => {
    const rows = parseCsv("patient_id,hr\r\npt-000001,72\r\npt-000002,\r\n");
    expect(rows).toEqual([["patient_id", "hr"], ["pt-000001", "72"], ["pt-000002", ""]]);
  });

  it("handles quoted cells with embedded commas and quotes", () => {
    const rows = parseCsv('a,b\n"x,y","he said ""hi"""\n');
    expect(rows[1]).toEqual(["x,y", 'he said "hi"']);
  });

  it("drops the trailing empty line only", () => {
    expect(parseCsv("a\n1\n")).toHaveLength(2);
  });
});

describe("heat colors", () => {
  it("is neutral for nulls and saturates with |r|", () => {
    expect(heatColor(null)).toBe("#f4f4f4");
    expect(heatColor(1)).not.toBe(heatColor(-1));
    expect(heatColor(0.1)).not.toBe(heatColor(0.9));
  });
});
