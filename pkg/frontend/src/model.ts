// Console view model: a single-step-consistent mirror of the backend.
//
// Rendering always reads `latest`, which is replaced wholesale per step
// event, so a frame can never mix two simulation steps. Controls stay
// disabled until the connect handshake (hello + hydration) completes and
// while a command is waiting for its acknowledgment.

import type { BackendClient } from "./api.js";
import type {
  BlackboardSnapshot,
  ConsoleEvent,
  StateSnapshot,
  StepEvent,
  TerrainSnapshot,
} from "./types.js";

export type Connection = "disconnected" | "connecting" | "live";

export interface TickerLine {
  t: number;
  text: string;
}

const FLAG_ALLOW_LIST = [
  "CONTINUE_FLG",
  "MOVING_FLG",
  "SENSING_ARRIVAL_FLG",
  "SENSING_CHECK_MOUND_FLG",
  "SENSING_LOADED_FLG",
];

export class ConsoleViewModel {
  connection: Connection = "disconnected";
  latest: StateSnapshot | null = null;
  blackboard: BlackboardSnapshot = {};
  terrain: TerrainSnapshot | null = null;
  activePath: [number, number][] = [];
  ticker: TickerLine[] = [];
  taskBadges: Record<string, string> = {};
  estopped = false;
  pendingCommand = false;
  banner: string | null = "connecting";
  selectedTask: number | null = null;
  private terrainStale = true;

  constructor(private readonly client: BackendClient) {}

  get controlsEnabled(): boolean {
    return this.connection === "live" && !this.pendingCommand;
  }

  // the emergency stop must stay reachable whenever we can talk at all
  get estopEnabled(): boolean {
    return this.connection === "live";
  }

  flagAllowList(): string[] {
    return FLAG_ALLOW_LIST.filter((k) => k in this.blackboard);
  }

  async hydrate(): Promise<void> {
    this.connection = "connecting";
    this.banner = "connecting";
    const [state, blackboard, terrain] = await Promise.all([
      this.client.state(),
      this.client.blackboard(),
      this.client.terrain(),
    ]);
    this.latest = state;
    this.blackboard = blackboard;
    this.terrain = terrain;
    this.terrainStale = false;
    this.activePath = state.path ?? [];
    this.estopped = state.estopped;
    for (const [id, task] of Object.entries(state.tasks)) {
      this.taskBadges[id] = task.status;
    }
    this.connection = "live";
    this.banner = null;
  }

  onDisconnect(): void {
    this.connection = "disconnected";
    this.banner = "backend unreachable, retrying";
  }

  onEvent(event: ConsoleEvent): void {
    switch (event.type) {
      case "hello":
        return;
      case "step": {
        const step = event as StepEvent;
        if (this.latest) {
          this.latest = {
            ...this.latest,
            t: step.t,
            step: step.step,
            dump: step.dump,
            excavator: step.excavator,
            volumes: step.volumes,
          };
        }
        if (this.terrainStale) void this.refreshTerrain();
        return;
      }
      case "flag": {
        const entry = this.blackboard[event.key];
        this.blackboard = {
          ...this.blackboard,
          [event.key]: {
            value: event.new,
            revision: event.revision,
            updated_at: event.t,
          },
        };
        const was = entry ? String(entry.value) : "unset";
        this.pushTicker(event.t, `${event.key}: ${was} -> ${event.new}`);
        return;
      }
      case "task_started":
        this.taskBadges[String(event.task_id)] = "RUNNING";
        this.pushTicker(event.t, `task ${event.task_id} started (${event.model})`);
        return;
      case "task_finished":
        this.taskBadges[String(event.task_id)] = event.status ?? "DONE";
        this.pushTicker(event.t, `task ${event.task_id} ${event.status}`);
        return;
      case "emergency_stop":
        this.estopped = true;
        this.pushTicker(event.t, "EMERGENCY STOP");
        return;
      case "nav_path":
        this.activePath = event.points ?? [];
        return;
      case "dig":
      case "bucket_release":
      case "vessel_dump":
        this.terrainStale = true;
        this.pushTicker(event.t, this.describeSoil(event));
        return;
      default:
        return;
    }
  }

  private describeSoil(event: ConsoleEvent & { [key: string]: unknown }): string {
    if (event.type === "dig") return `dig ${(event.scooped as number).toFixed(2)} m3`;
    if (event.type === "bucket_release")
      return `load ${(event.to_vessel as number).toFixed(2)} m3 into vessel`;
    return `dump ${(event.volume as number).toFixed(2)} m3 at the pile`;
  }

  private async refreshTerrain(): Promise<void> {
    this.terrainStale = false;
    try {
      this.terrain = await this.client.terrain();
    } catch {
      this.terrainStale = true; // retry on the next step event
    }
  }

  private pushTicker(t: number, text: string): void {
    this.ticker.push({ t, text });
    if (this.ticker.length > 200) this.ticker.splice(0, this.ticker.length - 200);
  }

  // --- operator actions: fire, lock controls, unlock on acknowledgment ---
  async launchTask(taskId: number): Promise<string | null> {
    if (!this.controlsEnabled) return "controls disabled";
    this.pendingCommand = true;
    try {
      await this.client.startTask(taskId);
      return null;
    } catch (err) {
      const e = err as { error?: string; message?: string };
      return `${e.error ?? "error"}: ${e.message ?? ""}`;
    } finally {
      this.pendingCommand = false;
    }
  }

  async estop(): Promise<string | null> {
    if (!this.estopEnabled) return "not connected";
    try {
      await this.client.emergencyStop();
      this.estopped = true;
      return null;
    } catch (err) {
      const e = err as { error?: string };
      return e.error ?? "error";
    }
  }

  async setFlag(key: string, value: boolean): Promise<string | null> {
    if (!this.controlsEnabled) return "controls disabled";
    if (!this.flagAllowList().includes(key)) return `${key} is not operator-writable`;
    this.pendingCommand = true;
    try {
      await this.client.setFlag(key, value);
      return null;
    } catch (err) {
      const e = err as { error?: string; message?: string };
      return `${e.error ?? "error"}: ${e.message ?? ""}`;
    } finally {
      this.pendingCommand = false;
    }
  }
}
