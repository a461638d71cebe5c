// Browser entry point: keeps one ViewModel in sync with the gateway
// (initial REST fetch, then SSE with Last-Event-ID resume, then polling
// if the stream is unavailable) and renders sensor panels, the map, and
// the alert table. User actions (ack, threshold edits) go through the
// REST API and land back in the view model.

import { ackAlert, ApiError, fetchAlerts, fetchMap, fetchNodes, putThresholds } from "./api.js";
import { renderMap } from "./map.js";
import { openEventStream, StreamHandle } from "./sse.js";
import {
  activeAlerts,
  applyEvent,
  applyInitialState,
  createViewModel,
  upsertAlert,
  ViewModel,
} from "./viewModel.js";

const POLL_INTERVAL_MS = 5000;
const RECONNECT_MIN_MS = 1000;
const RECONNECT_MAX_MS = 15000;

function apiBase(): string {
  const param = new URLSearchParams(window.location.search).get("api");
  if (param) return param.replace(/\/$/, "");
  return window.location.origin;
}

class App {
  vm: ViewModel = createViewModel();
  base = apiBase();
  stream: StreamHandle | null = null;
  reconnectDelay = RECONNECT_MIN_MS;
  pollTimer: number | null = null;
  operatorId: string;

  constructor() {
    const stored = window.localStorage.getItem("wlds-operator");
    this.operatorId = stored ?? `op-${Math.random().toString(36).slice(2, 8)}`;
    window.localStorage.setItem("wlds-operator", this.operatorId);
  }

  async start(): Promise<void> {
    await this.resync();
    this.connect();
  }

  async resync(): Promise<void> {
    try {
      const [nodes, map, alerts] = await Promise.all([
        fetchNodes(this.base),
        fetchMap(this.base),
        fetchAlerts(this.base, true),
      ]);
      applyInitialState(this.vm, nodes, map, alerts);
      this.render();
    } catch {
      this.vm.connection = "disconnected";
      this.render();
    }
  }

  connect(): void {
    this.stream?.close();
    this.vm.connection = "connecting";
    this.render();
    this.stream = openEventStream(this.base, this.vm.lastEventId, {
      onOpen: () => {
        this.stopPolling();
        this.reconnectDelay = RECONNECT_MIN_MS;
        this.vm.connection = "live";
        this.render();
      },
      onEvent: (event) => {
        const result = applyEvent(this.vm, event);
        if (result !== "applied" || this.vm.needsResync) {
          // lost continuity: refetch everything, stream stays open on gap
          void this.resync();
          if (result === "resync") this.reconnect();
          return;
        }
        this.render();
      },
      onClose: () => {
        this.vm.connection = "disconnected";
        this.render();
        this.startPolling();
        this.reconnect();
      },
    });
  }

  reconnect(): void {
    const delay = this.reconnectDelay;
    this.reconnectDelay = Math.min(this.reconnectDelay * 2, RECONNECT_MAX_MS);
    window.setTimeout(() => this.connect(), delay);
  }

  startPolling(): void {
    if (this.pollTimer !== null) return;
    this.vm.connection = "polling";
    this.pollTimer = window.setInterval(() => void this.resync(), POLL_INTERVAL_MS);
  }

  stopPolling(): void {
    if (this.pollTimer !== null) {
      window.clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  async ack(alertId: string): Promise<void> {
    try {
      upsertAlert(this.vm, await ackAlert(this.base, alertId, this.operatorId));
    } catch (error) {
      if (error instanceof ApiError && error.body.alert) {
        // raced: someone else acked, or the alert cleared; show their state
        upsertAlert(this.vm, error.body.alert as never);
      } else {
        void this.resync();
      }
    }
    this.render();
  }

  async saveThresholds(nodeId: string, form: HTMLFormElement): Promise<void> {
    const fields: Record<string, number> = {};
    for (const name of ["set_limit_flow_lpm", "fill_threshold_cm", "gas_threshold_ppm"]) {
      const input = form.elements.namedItem(name) as HTMLInputElement | null;
      if (input && input.value.trim() !== "") fields[name] = Number(input.value);
    }
    const errorBox = form.querySelector(".form-error") as HTMLElement;
    try {
      const snapshot = await putThresholds(this.base, nodeId, fields);
      const panel = this.vm.nodes.get(nodeId);
      if (panel) panel.spec = snapshot.spec;
      errorBox.textContent = "";
      form.classList.remove("editing");
      this.render();
    } catch (error) {
      const violations =
        error instanceof ApiError && Array.isArray(error.body.violations)
          ? (error.body.violations as string[]).join("; ")
          : String(error instanceof Error ? error.message : error);
      errorBox.textContent = violations;
    }
  }

  // -- rendering ------------------------------------------------------------

  render(): void {
    this.renderBanner();
    this.renderPanels();
    renderMap(this.vm, document.querySelector("#map") as SVGSVGElement);
    this.renderAlerts();
  }

  renderBanner(): void {
    const banner = document.querySelector("#connection") as HTMLElement;
    banner.textContent =
      this.vm.connection === "live"
        ? "live"
        : this.vm.connection === "polling"
          ? "polling (stream unavailable)"
          : this.vm.connection;
    banner.className = `connection connection-${this.vm.connection}`;
  }

  renderPanels(): void {
    const host = document.querySelector("#panels") as HTMLElement;
    const editing = new Set(
      [...host.querySelectorAll("form.editing")].map((f) => (f as HTMLFormElement).dataset.node),
    );
    host.replaceChildren();
    const panels = [...this.vm.nodes.values()].sort((a, b) => a.nodeId.localeCompare(b.nodeId));
    for (const panel of panels) {
      const card = document.createElement("section");
      card.className = `panel panel-${panel.color.toLowerCase()}`;
      card.dataset.node = panel.nodeId;

      const head = document.createElement("header");
      const title = document.createElement("strong");
      title.textContent = `node ${panel.nodeId.slice(-4)}`;
      title.title = panel.nodeId;
      const state = document.createElement("span");
      state.className = "panel-state";
      state.textContent = panel.color === "RED" ? "WARNING" : "NORMAL";
      head.append(title, state);
      card.appendChild(head);

      const dl = document.createElement("dl");
      const rows: Array<[string, string]> = [
        ["flow", panel.flowLpm === null ? "–" : `${panel.flowLpm.toFixed(2)} L/min`],
        ["fill", panel.garbageLevelCm === null ? "–" : `${panel.garbageLevelCm.toFixed(1)} cm`],
        ["gas", panel.gasPpm === null ? "–" : `${panel.gasPpm.toFixed(1)} ppm`],
        [
          "limits",
          `flow<${panel.spec.set_limit_flow_lpm} fill>${panel.spec.fill_threshold_cm} gas>${panel.spec.gas_threshold_ppm}`,
        ],
      ];
      for (const [k, v] of rows) {
        const dt = document.createElement("dt");
        dt.textContent = k;
        const dd = document.createElement("dd");
        dd.textContent = v;
        dl.append(dt, dd);
      }
      card.appendChild(dl);

      card.appendChild(this.thresholdForm(panel.nodeId, editing.has(panel.nodeId)));
      host.appendChild(card);
    }
  }

  thresholdForm(nodeId: string, editing: boolean): HTMLFormElement {
    const form = document.createElement("form");
    form.className = editing ? "thresholds editing" : "thresholds";
    form.dataset.node = nodeId;
    const toggle = document.createElement("button");
    toggle.type = "button";
    toggle.textContent = "edit thresholds";
    toggle.addEventListener("click", () => form.classList.toggle("editing"));
    form.appendChild(toggle);

    const fieldsBox = document.createElement("div");
    fieldsBox.className = "threshold-fields";
    for (const [name, label] of [
      ["set_limit_flow_lpm", "set limit L/min"],
      ["fill_threshold_cm", "fill threshold cm"],
      ["gas_threshold_ppm", "gas threshold ppm"],
    ] as const) {
      const wrap = document.createElement("label");
      wrap.textContent = label;
      const input = document.createElement("input");
      input.name = name;
      input.type = "number";
      input.step = "any";
      wrap.appendChild(input);
      fieldsBox.appendChild(wrap);
    }
    const save = document.createElement("button");
    save.type = "submit";
    save.textContent = "save";
    const errorBox = document.createElement("div");
    errorBox.className = "form-error";
    fieldsBox.append(save, errorBox);
    form.appendChild(fieldsBox);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.saveThresholds(nodeId, form);
    });
    return form;
  }

  renderAlerts(): void {
    const host = document.querySelector("#alerts tbody") as HTMLElement;
    host.replaceChildren();
    for (const alert of activeAlerts(this.vm)) {
      const row = document.createElement("tr");
      const cells = [
        alert.alert_id.slice(-10),
        alert.node_id.slice(-4),
        alert.causes.join("+"),
        `${alert.garbage_level_cm.toFixed(1)} cm`,
        new Date(alert.raised_at_ms).toISOString().slice(11, 19),
        alert.dispatched_to || "–",
      ];
      for (const text of cells) {
        const td = document.createElement("td");
        td.textContent = text;
        row.appendChild(td);
      }
      const ackCell = document.createElement("td");
      if (alert.ack) {
        ackCell.textContent = `acked by ${alert.ack.operator_id}`;
      } else {
        const button = document.createElement("button");
        button.textContent = "ack";
        button.addEventListener("click", () => void this.ack(alert.alert_id));
        ackCell.appendChild(button);
      }
      row.appendChild(ackCell);
      host.appendChild(row);
    }
    (document.querySelector("#alert-count") as HTMLElement).textContent = String(
      activeAlerts(this.vm).length,
    );
  }
}

new App().start();
