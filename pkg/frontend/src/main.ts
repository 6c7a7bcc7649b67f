// Console bootstrap: wire the view model to the DOM, run the render loop.

import { BackendClient, EventSocket } from "./api.js";
import { ConsoleViewModel } from "./model.js";
import { DEFAULT_THEME, MapView, SitePoints } from "./render.js";

const BASE_URL = (window.location.hash.slice(1) || "http://127.0.0.1:8080");

// replaced by the backend's own site layout once /terrain hydrates
let sitePoints: SitePoints = {
  point1: [12, 20, Math.PI / 2],
  point2: [12, 26, Math.PI / 2],
  point3: [24, 26, 0],
  point4: [36, 26, Math.PI / 2],
  point5: [36, 20, Math.PI / 2],
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("map");
const ctx = canvas.getContext("2d");
if (!ctx) throw new Error("2d context unavailable");
canvas.width = DEFAULT_THEME.widthPx;
canvas.height = DEFAULT_THEME.heightPx;

const banner = el<HTMLDivElement>("banner");
const clock = el<HTMLSpanElement>("clock");
const taskList = el<HTMLDivElement>("tasks");
const flagTable = el<HTMLTableSectionElement>("flags");
const ticker = el<HTMLUListElement>("ticker");
const estopBtn = el<HTMLButtonElement>("estop");
const message = el<HTMLDivElement>("message");

const client = new BackendClient(BASE_URL);
const vm = new ConsoleViewModel(client);
const map = new MapView();

const socket = new EventSocket(BASE_URL, {
  onEvent: (event) => vm.onEvent(event),
  onOpen: () => {
    vm.hydrate()
      .then(() => {
        if (vm.terrain?.points) sitePoints = vm.terrain.points;
      })
      .catch(() => vm.onDisconnect());
  },
  onClose: () => vm.onDisconnect(),
});
socket.open();

estopBtn.onclick = async () => {
  const err = await vm.estop();
  message.textContent = err ? `e-stop failed: ${err}` : "emergency stop sent";
};

async function refreshTasks(): Promise<void> {
  try {
    const { tasks } = await client.tasks();
    taskList.innerHTML = "";
    for (const task of tasks) {
      const row = document.createElement("div");
      row.className = "task-row";
      const badge = vm.taskBadges[String(task.task_id)] ?? "IDLE";
      const btn = document.createElement("button");
      btn.textContent = `start #${task.task_id} (${task.model_name})`;
      btn.disabled = !vm.controlsEnabled || badge === "RUNNING";
      btn.onclick = async () => {
        const err = await vm.launchTask(task.task_id);
        message.textContent = err ? `launch failed: ${err}` : `task ${task.task_id} accepted`;
      };
      const status = document.createElement("span");
      status.textContent = badge;
      status.className = `badge badge-${badge.toLowerCase()}`;
      row.append(btn, status);
      taskList.append(row);
    }
  } catch {
    // list refresh is cosmetic; the banner already reports connectivity
  }
}

function renderFlags(): void {
  flagTable.innerHTML = "";
  const editable = new Set(vm.flagAllowList());
  for (const [key, entry] of Object.entries(vm.blackboard)) {
    const tr = document.createElement("tr");
    const name = document.createElement("td");
    name.textContent = key;
    const value = document.createElement("td");
    value.textContent = String(entry.value);
    const rev = document.createElement("td");
    rev.textContent = `r${entry.revision}`;
    const action = document.createElement("td");
    if (typeof entry.value === "boolean" && editable.has(key)) {
      const toggle = document.createElement("button");
      toggle.textContent = entry.value ? "set false" : "set true";
      toggle.disabled = !vm.controlsEnabled;
      toggle.onclick = async () => {
        const err = await vm.setFlag(key, !(entry.value as boolean));
        message.textContent = err ? `flag failed: ${err}` : `${key} updated`;
      };
      action.append(toggle);
    }
    tr.append(name, value, rev, action);
    flagTable.append(tr);
  }
}

function renderTicker(): void {
  ticker.innerHTML = "";
  for (const line of vm.ticker.slice(-14).reverse()) {
    const li = document.createElement("li");
    li.textContent = `[${line.t.toFixed(1)}s] ${line.text}`;
    ticker.append(li);
  }
}

let lastBadges = "";
function frame(): void {
  banner.style.display = vm.banner ? "block" : "none";
  banner.textContent = vm.banner ?? "";
  estopBtn.disabled = !vm.estopEnabled;
  if (vm.latest) clock.textContent = `t=${vm.latest.t.toFixed(1)}s step ${vm.latest.step}`;
  map.render(ctx as unknown as import("./render.js").Draw2D, vm, sitePoints);
  renderFlags();
  renderTicker();
  const badges = JSON.stringify(vm.taskBadges) + vm.controlsEnabled;
  if (badges !== lastBadges) {
    lastBadges = badges;
    void refreshTasks();
  }
  requestAnimationFrame(frame);
}

void refreshTasks();
requestAnimationFrame(frame);
