// Wire types for the orchestrator's HTTP/JSON contract.

export interface PoseEstimate {
  x: number;
  y: number;
  yaw: number;
}

export interface DumpState {
  x: number;
  y: number;
  yaw: number;
  v: number;
  w: number;
  vessel_angle: number;
  vessel_load: number;
  capacity: number;
  estimate: PoseEstimate;
}

export interface ExcavatorState {
  base: [number, number, number];
  joints: [number, number, number, number];
  bucket_load: number;
}

export interface TaskInfo {
  model_name: string;
  status: string;
  started_at: number;
  finished_at: number | null;
}

export interface GoalInfo {
  goal_id: number;
  server: string;
  model: string;
  state: string;
  feedback: number | null;
}

export interface StateSnapshot {
  t: number;
  step: number;
  dump: DumpState;
  excavator: ExcavatorState;
  volumes: {
    terrain: number;
    mound: number;
    dumped: number;
    conservation_residual: number;
  };
  tasks: Record<string, TaskInfo>;
  goals: GoalInfo[];
  estopped: boolean;
  path?: [number, number][];
}

export interface BlackboardEntry {
  value: boolean | number | string;
  revision: number;
  updated_at: number;
}

export type BlackboardSnapshot = Record<string, BlackboardEntry>;

export interface TerrainSnapshot {
  resolution: number;
  origin: [number, number];
  heights: number[][];
  version: number;
  points?: Record<string, [number, number, number]>;
}

// one JSON object per simulation step or transition on the event socket
export interface StepEvent extends Omit<StateSnapshot, "tasks" | "goals" | "estopped"> {
  type: "step";
  seq: number;
}

export interface FlagEvent {
  type: "flag";
  seq: number;
  t: number;
  key: string;
  old: boolean | number | string | null;
  new: boolean | number | string;
  revision: number;
}

export interface TaskEvent {
  type: "task_started" | "task_finished";
  seq: number;
  t: number;
  task_id: number;
  model?: string;
  status?: string;
}

export interface SoilEvent {
  type: "dig" | "bucket_release" | "vessel_dump";
  seq: number;
  t: number;
  [key: string]: unknown;
}

export interface HelloEvent {
  type: "hello";
  cursor: number;
  t: number;
}

export interface NavPathEvent {
  type: "nav_path";
  seq: number;
  t: number;
  goal_id: number;
  server: string;
  points: [number, number][];
}

export type ConsoleEvent =
  | StepEvent
  | FlagEvent
  | TaskEvent
  | SoilEvent
  | HelloEvent
  | NavPathEvent
  | { type: "emergency_stop"; seq: number; t: number; canceled_tasks: number[] }
  | { type: "goal_opened" | "goal_rejected"; seq: number; t: number; [key: string]: unknown };
