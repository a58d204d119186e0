// Built with `wasm-pack build crates/web --target web --out-dir www/pkg`.
import init, { trace, det_grid, small_sweep } from "./pkg/bbvi_web.js";

const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.className = "err";
  el.textContent = String(e);
}

function plotTrace(r) {
  const c = $("t-plot");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const logs = Array.from(r, (v) => Math.log10(Math.max(v, 1e-12)));
  const lo = Math.min(...logs), hi = Math.max(...logs);
  const sx = (c.width - 40) / Math.max(r.length - 1, 1);
  const sy = (c.height - 20) / Math.max(hi - lo, 1e-9);
  const y = (v) => 10 + (hi - v) * sy;
  // eps = 1 reference line
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  ctx.moveTo(30, y(0));
  ctx.lineTo(c.width - 10, y(0));
  ctx.stroke();
  ctx.strokeStyle = "#246";
  ctx.beginPath();
  logs.forEach((v, t) => (t ? ctx.lineTo(30 + t * sx, y(v)) : ctx.moveTo(30, y(v))));
  ctx.stroke();
  ctx.fillStyle = "#222";
  ctx.fillText(`1e${hi.toFixed(1)}`, 0, 12);
  ctx.fillText(`1e${lo.toFixed(1)}`, 0, c.height - 4);
}

function runTrace() {
  const msg = $("t-msg");
  msg.className = "";
  try {
    const r = trace($("t-family").value, +$("t-n").value, +$("t-step").value, +$("t-iters").value, 1n);
    plotTrace(r);
    const hit = r.findIndex((v) => v <= 1);
    msg.textContent = `r_0 = ${r[0].toFixed(2)}, final r = ${r[r.length - 1].toExponential(3)}, ` +
      (hit >= 0 ? `r <= 1 first at t = ${hit}` : "never reached r <= 1");
  } catch (e) {
    fail(msg, e);
  }
}

function drawGrid() {
  const msg = $("g-msg");
  msg.className = "";
  const k = +$("g-count").value, a = +$("g-range").value;
  try {
    const g = det_grid(+$("g-z").value, k, -a, a);
    const c = $("g-plot");
    const ctx = c.getContext("2d");
    const cell = c.width / k;
    let scale = 0;
    for (let i = 0; i < g.length; i += 2) scale = Math.max(scale, Math.abs(g[i]));
    let negative = 0;
    for (let i = 0; i < k; i++) {
      for (let j = 0; j < k; j++) {
        const det = g[2 * (i * k + j)];
        const s = Math.sqrt(Math.abs(det) / (scale || 1));
        const shade = Math.round(255 * (1 - s));
        ctx.fillStyle = det < 0 ? `rgb(255,${shade},${shade})` : `rgb(${shade},${shade},255)`;
        // x to the right, y upward
        ctx.fillRect(i * cell, c.height - (j + 1) * cell, cell + 1, cell + 1);
        if (g[2 * (i * k + j) + 1] < 0) negative++;
      }
    }
    msg.textContent = `red: det < 0, blue: det > 0. ${negative} of ${k * k} points have a negative eigenvalue.`;
  } catch (e) {
    fail(msg, e);
  }
}

function runSweep() {
  const out = $("s-out");
  out.className = "";
  try {
    const csv = small_sweep(+$("s-n").value, +$("s-count").value, +$("s-tmax").value, +$("s-reps").value, 1n);
    const [head, ...rows] = csv.trim().split("\n").map((l) => l.split(","));
    const table = document.createElement("table");
    table.innerHTML = "<tr>" + head.map((h) => `<th>${h}</th>`).join("") + "</tr>" +
      rows.map((r) => "<tr>" + r.map((v) => `<td>${v}</td>`).join("") + "</tr>").join("");
    out.replaceChildren(table);
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("t-run").onclick = runTrace;
$("g-run").onclick = drawGrid;
$("s-run").onclick = runSweep;
runTrace();
drawGrid();
