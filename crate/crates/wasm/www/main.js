import init, { simulate, sweep, quota_scatter } from "./pkg/distfid_wasm.js";

const $ = (id) => document.getElementById(id);
const nums = (s) => new Float64Array(s.split(",").map(Number));
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

function guard(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.textContent = String(e);
    out.classList.add("err");
  }
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(30, 10);
  ctx.lineTo(30, h - 20);
  ctx.lineTo(w - 10, h - 20);
  ctx.stroke();
}

// Stacked per-step probabilities of the first trial, one colour per symbol.
function drawTrace(canvas, trace) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  axes(ctx, w, h);
  const bw = (w - 40) / trace.length;
  trace.forEach((probs, t) => {
    let y = h - 20;
    probs.forEach((p, k) => {
      const ph = p * (h - 30);
      ctx.fillStyle = COLORS[k % COLORS.length];
      ctx.fillRect(31 + t * bw, y - ph, Math.max(bw - 0.5, 0.5), ph);
      y -= ph;
    });
  });
}

function drawLines(canvas, curves) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  axes(ctx, w, h);
  const ts = curves.flatMap((c) => c.temperatures);
  const tmax = Math.max(...ts);
  const x = (t) => 30 + (t / tmax) * (w - 45);
  const y = (e) => h - 20 - e * (h - 30);
  curves.forEach((c, i) => {
    ctx.strokeStyle = COLORS[i];
    ctx.fillStyle = COLORS[i];
    ctx.beginPath();
    c.temperatures.forEach((t, j) => (j ? ctx.lineTo(x(t), y(c.e_score[j])) : ctx.moveTo(x(t), y(c.e_score[j]))));
    ctx.stroke();
    ctx.fillText(c.family, w - 30, 20 + 14 * i);
  });
}

function drawScatter(canvas, s) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  axes(ctx, w, h);
  const xr = Math.max(1e-9, ...s.residuals.map(Math.abs));
  const yr = Math.max(1e-9, ...s.deltas.map(Math.abs));
  const x = (v) => 30 + ((v / xr + 1) / 2) * (w - 45);
  const y = (v) => h - 20 - ((v / yr + 1) / 2) * (h - 30);
  ctx.fillStyle = "rgba(31,119,180,0.3)";
  s.residuals.forEach((d, i) => ctx.fillRect(x(d) - 1, y(s.deltas[i]) - 1, 2, 2));
  if (s.slope !== null) {
    ctx.strokeStyle = "#d62728";
    ctx.beginPath();
    ctx.moveTo(x(-xr), y(-xr * s.slope));
    ctx.lineTo(x(xr), y(xr * s.slope));
    ctx.stroke();
  }
}

await init();

$("sim-go").onclick = () =>
  guard($("sim-out"), () => {
    const r = JSON.parse(
      simulate($("sim-family").value, nums($("sim-probs").value), +$("sim-eps").value, +$("sim-temp").value,
        +$("sim-samples").value, +$("sim-runs").value, BigInt($("sim-seed").value)));
    drawTrace($("sim-trace"), r.trace);
    const { trace, samples, ...summary } = r;
    $("sim-out").textContent = JSON.stringify(summary, null, 1);
  });

$("sw-go").onclick = () =>
  guard($("sw-out"), () => {
    const curves = JSON.parse(sweep(nums($("sw-probs").value), nums($("sw-grid").value), +$("sw-eps").value, 3, 7n));
    drawLines($("sw-plot"), curves);
    $("sw-out").textContent = curves.map((c) => `${c.family}: ${c.e_score.map((e) => e.toFixed(3)).join(" ")}`).join("\n");
  });

$("q-go").onclick = () =>
  guard($("q-out"), () => {
    const s = JSON.parse(
      quota_scatter($("q-family").value, nums($("q-probs").value), +$("q-lambda").value, $("q-ld").checked,
        +$("q-samples").value, +$("q-runs").value, 7n));
    drawScatter($("q-plot"), s);
    $("q-out").textContent = `pairs ${s.pairs}  r ${s.r?.toFixed(4) ?? "undefined"}  slope ${s.slope?.toFixed(4) ?? "undefined"}`;
  });

$("sim-go").click();
$("sw-go").click();
$("q-go").click();
