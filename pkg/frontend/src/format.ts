// Every number shown in the UI passes through `fmt`, which renders the
// value exactly as JavaScript serialises the JSON number it received. The
// screens therefore display service payload values verbatim — no rounding,
// no local recomputation.

export function fmt(value: number | null | undefined): string {
  if (value === null || value === undefined) return "—";
  return String(value);
}

/** Render an arbitrary trace/payload value: numbers via fmt, rest as-is. */
export function fmtValue(value: unknown): string {
  if (value === null || value === undefined) return "—";
  if (typeof value === "number") return fmt(value);
  if (typeof value === "boolean") return value ? "true" : "false";
  if (Array.isArray(value)) return value.map(fmtValue).join(", ");
  return String(value);
}

const VERDICT_LABELS: Record<string, string> = {
  escalate: "Escalate",
  stay: "Stay",
  de_escalate: "De-escalate",
  eliminate: "Eliminate",
  suspend: "Suspend",
  terminate: "Terminate",
};

export function verdictLabel(verdict: string | null): string {
  if (verdict === null) return "—";
  return VERDICT_LABELS[verdict] ?? verdict;
}

const ORIGIN_LABELS: Record<string, string> = {
  dose_escalation: "dose escalation",
  backfill: "backfill",
  stage_two: "stage II",
};

export function originLabel(origin: string): string {
  return ORIGIN_LABELS[origin] ?? origin;
}

export function phaseLabel(phase: string): string {
  return phase.replace(/_/g, " ");
}
