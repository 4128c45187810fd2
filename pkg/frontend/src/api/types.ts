// Payload shapes for the BE-BOIN trial-conduct HTTP service. These mirror
// the JSON the service returns; the UI renders these values verbatim and
// never derives decision quantities on its own.

export interface TrialConfig {
  num_doses: number;
  phi: number;
  cohort_size: number;
  n_stage1: number;
  dlt_window_months: number;
  [key: string]: unknown;
}

export interface DoseSummary {
  dose: number;
  n: number;
  dlt_observed: number;
  pending: number;
  completed: number;
  tf: number;
  mf: number;
  responses: number;
  observed_fraction: number;
  posterior_mean: number;
  imputed_rate: number;
}

export interface PatientRow {
  id: string;
  dose: number;
  origin: string;
  enroll_time: number;
  tox_status: string;
  response_status: string;
  time_to_dlt?: number;
}

export interface TrialDocument {
  schema_version: number;
  config: TrialConfig;
  patients: PatientRow[];
  current_dose: number;
  phase: string;
  eliminated_doses: number[];
  clock_months: number;
  mtd: number | null;
  obd: number | null;
  events: Record<string, unknown>[];
}

export interface TrialPayload {
  trial_id: string;
  version: number;
  phase: string;
  document: TrialDocument;
  summaries: DoseSummary[];
}

export interface BackfillEligibilityRow {
  dose: number;
  eligible: boolean;
  safety_ok: boolean;
  efficacy_ok: boolean;
  cap_ok: boolean;
  eliminated: boolean;
  imputed_rate: number;
  rescue_rate: number | null;
  responses_at_or_below: number;
  n: number;
}

export interface RoutingPayload {
  kind: string;
  dose: number | null;
  reason: string;
  eligibility: BackfillEligibilityRow[];
}

export interface ConflictReport {
  current_dose: number;
  current_class: string;
  backfilled_classes: [number, string][];
  conflicting_doses: number[];
  b_star: number | null;
  conflict: boolean;
}

/** One decision-trace entry: a step name plus step-specific values. */
export type TraceStep = { step: string } & Record<string, unknown>;

export interface DecisionPayload {
  trial_id: string;
  version: number;
  phase: string;
  at: number;
  due: boolean;
  verdict: string | null;
  target_dose: number | null;
  current_dose: number;
  suspend_reason: string | null;
  pooled_estimate: number | null;
  trace: TraceStep[];
  conflict_report: ConflictReport | null;
  backfill_eligibility: BackfillEligibilityRow[];
  summaries: DoseSummary[];
  routing_preview: RoutingPayload;
  decision_event: Record<string, unknown> | null;
}

export interface EnrollRequest {
  enroll_time: number;
  dose?: number;
  origin?: string;
  patient_id?: string;
  version?: number;
}

export interface EnrollResponse {
  trial_id: string;
  version: number;
  phase: string;
  patient_id: string;
  dose: number;
  origin: string;
  routing: RoutingPayload | null;
  summaries: DoseSummary[];
}

export interface OutcomeRequest {
  patient_id: string;
  time: number;
  tox_status?: string;
  time_to_dlt?: number;
  response_status?: string;
  version?: number;
}

export interface OutcomeResponse {
  trial_id: string;
  version: number;
  phase: string;
  clock: number;
  summaries: DoseSummary[];
}

export interface AcceptedDecision {
  verdict: string;
  target_dose: number | null;
  time?: number;
}

export interface AdvanceResponse {
  trial_id: string;
  version: number;
  phase: string;
  clock: number;
  applied: Record<string, unknown>;
  verdict?: string;
  target_dose?: number | null;
  current_dose?: number;
  summaries: DoseSummary[];
}

export interface SelectionFit {
  doses: number[];
  raw_rates: number[];
  fitted: number[];
  weights: number[];
}

export interface SelectionUtilityRow {
  dose: number;
  counts: number[];
  probs: number[];
  utility: number;
}

export interface SelectionPayload {
  trial_id: string;
  version: number;
  phase: string;
  mtd: number | null;
  obd: number | null;
  dlt: number[];
  n: number[];
  fit: SelectionFit;
  utilities: SelectionUtilityRow[];
}

/** Decision-table rows arrive as CSV-parsed records: every cell a string. */
export type DecisionTableRow = Record<string, string>;

export interface DecisionTablePayload {
  phi: number;
  cohort: number;
  nmax: number;
  lambda_e: number;
  lambda_d: number;
  rows: DecisionTableRow[];
}

export interface FieldError {
  field: string;
  message: string;
}
