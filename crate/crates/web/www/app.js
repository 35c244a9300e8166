import init, { simulate, sweep, predict_replay, defaults } from "./pkg/shadow_web.js";

const PHASE_COLORS = {
  Checkpointing: "#4e79a7",
  Transferring: "#f28e2b",
  Restoring: "#e15759",
  Replaying: "#76b7b2",
  Finalizing: "#59a14f",
};

const $ = (sel) => document.querySelector(sel);

function showError(err) {
  const el = $("#error");
  el.textContent = String(err);
  el.hidden = false;
}

function clearError() {
  $("#error").hidden = true;
}

function fill(select, values) {
  for (const v of values) select.add(new Option(v, v));
}

function fmt(x) {
  return Number(x).toFixed(2);
}

function prepare(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "12px system-ui, sans-serif";
  return ctx;
}

function drawPhases(report) {
  const canvas = $("#phases");
  const ctx = prepare(canvas);
  const entries = Object.entries(report.phase_timings).filter(([p, s]) => PHASE_COLORS[p] && s > 0);
  const total = entries.reduce((acc, [, s]) => acc + s, 0);
  if (total === 0) return;
  const scale = (canvas.width - 2) / total;
  let x = 1;
  for (const [phase, secs] of entries) {
    const w = secs * scale;
    ctx.fillStyle = PHASE_COLORS[phase];
    ctx.fillRect(x, 8, w, 28);
    ctx.fillStyle = "#222";
    const label = `${phase} ${fmt(secs)}`;
    if (ctx.measureText(label).width < w - 4) ctx.fillText(label, x + 3, 52);
    x += w;
  }
}

function drawProbe(probe, end) {
  const canvas = $("#probe");
  const ctx = prepare(canvas);
  if (probe.length === 0) return;
  const scale = (canvas.width - 2) / Math.max(end, probe[probe.length - 1][0]);
  for (let i = 0; i < probe.length; i++) {
    const [t, up] = probe[i];
    const next = i + 1 < probe.length ? probe[i + 1][0] : end;
    ctx.fillStyle = up ? "#59a14f" : "#e15759";
    ctx.fillRect(1 + t * scale, 10, Math.max(1, (next - t) * scale), 30);
  }
  ctx.fillStyle = "#222";
  ctx.fillText("probe: green up, red down", 1, 60);
}

function runOnce(event) {
  event?.preventDefault();
  clearError();
  const f = new FormData($("#run-form"));
  let result;
  try {
    result = JSON.parse(
      simulate(f.get("config"), Number(f.get("rate")), BigInt(f.get("seed")), Number(f.get("cutoff")), f.get("fault")),
    );
  } catch (err) {
    return showError(err);
  }
  const r = result.report;
  const loss = r.loss_audit;
  const t = r.terminal_state;
  const replay = r.replay ? ` · replay ${fmt(r.replay.simulated)} s (predicted ${fmt(r.replay.predicted)})` : "";
  $("#run-summary").textContent =
    `${r.phase} in ${fmt(r.total)} s · downtime ${fmt(r.downtime.longest_streak_s)} s${replay} · ` +
    `${loss.published} published, ${loss.missing_seqs.length} missing, ${loss.duplicate_applications} duplicated · ` +
    `${t.survivor ?? "no survivor"} on ${t.node ?? "-"} · ${r.transient_failures} retried failures`;
  drawPhases(r);
  drawProbe(result.probe, r.end_time);
  const body = $("#timeline tbody");
  body.replaceChildren(
    ...result.timeline.map((e) => {
      const row = document.createElement("tr");
      for (const v of [fmt(e.t), e.kind, e.detail]) row.insertCell().textContent = v;
      return row;
    }),
  );
}

function drawSweep(rows, cutoff) {
  const canvas = $("#sweep-plot");
  const ctx = prepare(canvas);
  const pad = 36;
  const maxRate = Math.max(...rows.map((r) => r.rate));
  const maxY = Math.max(cutoff, ...rows.map((r) => r.total)) * 1.05;
  const x = (rate) => pad + (rate / maxRate) * (canvas.width - pad - 10);
  const y = (s) => canvas.height - pad + 10 - (s / maxY) * (canvas.height - pad - 10);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, y(0));
  ctx.lineTo(canvas.width - 10, y(0));
  ctx.moveTo(pad, y(0));
  ctx.lineTo(pad, 0);
  ctx.stroke();
  ctx.fillStyle = "#555";
  for (const r of rows) ctx.fillText(String(r.rate), x(r.rate) - 8, y(0) + 16);
  ctx.fillText(`${Math.round(maxY)} s`, 2, 12);
  const series = [
    ["total", "#4e79a7", []],
    ["replay", "#76b7b2", []],
    ["predicted_replay", "#e15759", [4, 4]],
  ];
  series.forEach(([key, color, dash], i) => {
    ctx.strokeStyle = color;
    ctx.setLineDash(dash);
    ctx.beginPath();
    rows.forEach((r, j) => (j === 0 ? ctx.moveTo : ctx.lineTo).call(ctx, x(r.rate), y(r[key])));
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = color;
    ctx.fillText(key.replace("_", " "), canvas.width - 130, 16 + i * 15);
  });
}

function runSweep(event) {
  event?.preventDefault();
  clearError();
  const f = new FormData($("#sweep-form"));
  const cutoff = Number(f.get("cutoff"));
  let rows;
  try {
    rows = JSON.parse(sweep(f.get("config"), BigInt(f.get("seed")), cutoff));
  } catch (err) {
    return showError(err);
  }
  drawSweep(rows, cutoff);
  $("#sweep-table tbody").replaceChildren(
    ...rows.map((r) => {
      const row = document.createElement("tr");
      const replay = fmt(r.replay) + (r.cutoff ? " (cutoff)" : "");
      for (const v of [r.rate, fmt(r.total), replay, fmt(r.predicted_replay), fmt(r.downtime)]) row.insertCell().textContent = v;
      return row;
    }),
  );
}

function updatePrediction() {
  const f = new FormData($("#predict-form"));
  const [rate, mu, accum, delay, cutoff] = ["rate", "mu", "accum", "delay", "cutoff"].map((k) => Number(f.get(k)));
  const replay = predict_replay(rate, mu, accum, delay, cutoff);
  const backlog = rate * (accum + delay);
  const capped = replay >= cutoff ? " (capped at the cutoff; messages left in the queue are cut over with the source)" : "";
  $("#predict-out").textContent = `backlog ${Math.round(backlog)} messages · replay ${fmt(replay)} s${capped}`;
}

await init();
const d = JSON.parse(defaults());
for (const sel of document.querySelectorAll("select[name=config]")) fill(sel, d.configurations);
fill($("select[name=fault]"), d.phases);
$("#run-form").addEventListener("submit", runOnce);
$("#sweep-form").addEventListener("submit", runSweep);
$("#predict-form").addEventListener("input", updatePrediction);
runOnce();
runSweep();
updatePrediction();
