// HTTP + WebSocket client for the orchestrator. No state of its own beyond
// the socket; everything lands in the view model.

import type { BlackboardSnapshot, ConsoleEvent, StateSnapshot, TerrainSnapshot } from "./types.js";

export interface ApiError {
  error: string;
  message: string;
}

export class BackendClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!res.ok) throw await this.toError(res);
    return (await res.json()) as T;
  }

  private async post<T>(path: string, body?: unknown): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!res.ok) throw await this.toError(res);
    return (await res.json()) as T;
  }

  private async toError(res: Response): Promise<ApiError> {
    try {
      const payload = await res.json();
      const detail = payload.detail ?? payload;
      return { error: detail.error ?? `HTTP ${res.status}`, message: detail.message ?? "" };
    } catch {
      return { error: `HTTP ${res.status}`, message: res.statusText };
    }
  }

  state(): Promise<StateSnapshot> {
    return this.get("/state");
  }

  blackboard(): Promise<BlackboardSnapshot> {
    return this.get("/blackboard");
  }

  terrain(): Promise<TerrainSnapshot> {
    return this.get("/terrain");
  }

  tasks(): Promise<{ tasks: { task_id: number; model_name: string; description?: string }[] }> {
    return this.get("/tasks");
  }

  startTask(taskId: number): Promise<{ task_id: number; status: string }> {
    return this.post(`/tasks/${taskId}/start`);
  }

  emergencyStop(): Promise<{ estopped: boolean; canceled: unknown[] }> {
    return this.post("/emergency_stop");
  }

  setFlag(key: string, value: boolean | number | string): Promise<{ revision: number }> {
    return this.post(`/blackboard/${key}`, { value });
  }
}

export interface EventSocketHandlers {
  onEvent: (event: ConsoleEvent) => void;
  onOpen?: () => void;
  onClose?: () => void;
}

type WebSocketCtor = new (url: string) => WebSocket;

// Thin reconnecting wrapper; the view model decides what a dropout means.
export class EventSocket {
  private ws: WebSocket | null = null;
  private closed = false;
  retryMs = 1000;

  constructor(
    private readonly baseUrl: string,
    private readonly handlers: EventSocketHandlers,
    private readonly wsCtor: WebSocketCtor = WebSocket,
  ) {}

  open(): void {
    const url = this.baseUrl.replace(/^http/, "ws") + "/events";
    this.ws = new this.wsCtor(url);
    this.ws.onopen = () => this.handlers.onOpen?.();
    this.ws.onmessage = (msg: MessageEvent) => {
      try {
        this.handlers.onEvent(JSON.parse(String(msg.data)) as ConsoleEvent);
      } catch {
        // malformed frame: drop it, the next step event resyncs us
      }
    };
    this.ws.onclose = () => {
      this.handlers.onClose?.();
      if (!this.closed) setTimeout(() => this.open(), this.retryMs);
    };
    this.ws.onerror = () => this.ws?.close();
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
