import init, { projectScores, memoryProfile, membershipMaps } from "./pkg/dmst_wasm_demo.js";

const $ = (id) => document.getElementById(id);

function parseList(text, parse) {
  return text.split(",").map((s) => s.trim()).filter((s) => s.length > 0).map(parse);
}

function showError(el, e) {
  el.innerHTML = `<span class="err">${String(e)}</span>`;
}

// 1. soft thresholding

function drawBars(canvas, scores, values, threshold) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const n = scores.length;
  const slot = w / n;
  const lo = Math.min(0, ...scores, threshold);
  const hi = Math.max(1, ...scores, threshold);
  const y = (v) => h - 20 - ((v - lo) / (hi - lo)) * (h - 40);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(0, y(0));
  ctx.lineTo(w, y(0));
  ctx.stroke();
  for (let i = 0; i < n; i++) {
    const x = i * slot + slot * 0.15;
    const bw = slot * 0.32;
    ctx.fillStyle = "#9bb7d4";
    ctx.fillRect(x, Math.min(y(0), y(scores[i])), bw, Math.abs(y(scores[i]) - y(0)));
    ctx.fillStyle = "#d2691e";
    ctx.fillRect(x + bw + 2, y(values[i]), bw, y(0) - y(values[i]));
    ctx.fillStyle = "#333";
    ctx.fillText(values[i].toFixed(3), x + bw, h - 4);
  }
  ctx.strokeStyle = "#2a7";
  ctx.setLineDash([6, 4]);
  ctx.beginPath();
  ctx.moveTo(0, y(threshold));
  ctx.lineTo(w, y(threshold));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.fillStyle = "#2a7";
  ctx.fillText(`τ = ${threshold.toFixed(3)}`, 4, y(threshold) - 4);
}

function runSoftThreshold() {
  const out = $("st-out");
  try {
    const shift = Number($("st-shift").value);
    const scores = parseList($("st-scores").value, Number).map((v) => v + shift);
    if (scores.some((v) => !Number.isFinite(v))) throw new Error("scores must be numbers");
    const k = Number($("st-k").value) || 0;
    const r = JSON.parse(projectScores(Float64Array.from(scores), k));
    out.textContent = `support {${r.support.join(", ")}}, sum ${r.values.reduce((a, b) => a + b, 0).toFixed(6)} ` +
      `(blue: scores shifted by ${shift.toFixed(2)}, orange: projection; the projection ignores the shift)`;
    drawBars($("st-canvas"), scores, r.values, r.threshold);
  } catch (e) {
    showError(out, e);
  }
}

// 2. memory scaling

const COLORS = { mhsa: "#c0392b", tssa: "#2980b9", dmsa: "#27ae60" };

function drawMemory(canvas, rows) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const xs = rows.map((r) => Math.log2(r.tokens));
  const ys = rows.map((r) => Math.log2(r.peak_floats));
  const [x0, x1] = [Math.min(...xs), Math.max(...xs) || 1];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const px = (v) => 50 + ((v - x0) / (x1 - x0 || 1)) * (w - 80);
  const py = (v) => h - 30 - ((v - y0) / (y1 - y0 || 1)) * (h - 60);
  ctx.fillStyle = "#333";
  ctx.fillText("log2 tokens →", w - 90, h - 8);
  ctx.fillText("log2 peak floats", 4, 14);
  for (const op of Object.keys(COLORS)) {
    const pts = rows.filter((r) => r.op === op);
    ctx.strokeStyle = COLORS[op];
    ctx.fillStyle = COLORS[op];
    ctx.beginPath();
    pts.forEach((r, i) => {
      const [x, y] = [px(Math.log2(r.tokens)), py(Math.log2(r.peak_floats))];
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    const last = pts[pts.length - 1];
    ctx.fillText(op, px(Math.log2(last.tokens)) - 30, py(Math.log2(last.peak_floats)) - 6);
  }
}

function runMemory() {
  const out = $("mem-out");
  try {
    const tokens = parseList($("mem-tokens").value, (s) => parseInt(s, 10)).sort((a, b) => a - b);
    const rows = JSON.parse(memoryProfile(Uint32Array.from(tokens), Number($("mem-dim").value), Number($("mem-heads").value)));
    let html = "<table><tr><th>op</th><th>tokens</th><th>peak floats</th><th>× per doubling</th></tr>";
    for (const op of Object.keys(COLORS)) {
      const pts = rows.filter((r) => r.op === op);
      pts.forEach((r, i) => {
        const prev = pts[i - 1];
        const ratio = prev ? Math.pow(r.peak_floats / prev.peak_floats, 1 / Math.log2(r.tokens / prev.tokens)).toFixed(2) : "";
        html += `<tr><td>${op}</td><td>${r.tokens}</td><td>${r.peak_floats}</td><td>${ratio}</td></tr>`;
      });
    }
    out.innerHTML = html + "</table>";
    drawMemory($("mem-canvas"), rows);
  } catch (e) {
    showError(out, e);
  }
}

// 3. membership maps

function drawMap(values, grid, groups) {
  const scale = 40;
  const canvas = document.createElement("canvas");
  canvas.width = canvas.height = grid * scale;
  const ctx = canvas.getContext("2d");
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  values.forEach((v, j) => {
    const g = hi > lo ? Math.round((255 * (v - lo)) / (hi - lo)) : 128;
    ctx.fillStyle = `rgb(${g},${g},${g})`;
    ctx.fillRect((j % grid) * scale, Math.floor(j / grid) * scale, scale, scale);
  });
  ctx.strokeStyle = "#e67e22";
  ctx.lineWidth = 2;
  const split = groups.findIndex((g) => g === 1);
  ctx.beginPath();
  ctx.moveTo(split * scale, 0);
  ctx.lineTo(split * scale, grid * scale);
  ctx.stroke();
  return canvas;
}

async function runMembership() {
  const out = $("mb-out");
  const maps = $("mb-maps");
  out.textContent = "training…";
  maps.innerHTML = "";
  await new Promise((r) => setTimeout(r, 20));
  try {
    const t0 = performance.now();
    const r = JSON.parse(membershipMaps(Number($("mb-seed").value), Number($("mb-epochs").value), Number($("mb-layer").value)));
    const acc = r.test_accuracy === null ? "n/a" : r.test_accuracy.toFixed(3);
    out.textContent = `layer ${r.layer}, ${r.epochs} epochs, held-out accuracy ${acc}, ${((performance.now() - t0) / 1000).toFixed(1)} s. ` +
      "Orange line: boundary between the two subspaces.";
    for (const m of r.maps) {
      const fig = document.createElement("span");
      fig.appendChild(drawMap(m.values, r.grid, r.groups.slice(0, r.grid)));
      fig.title = `head ${m.head}`;
      maps.appendChild(fig);
    }
  } catch (e) {
    showError(out, e);
  }
}

await init();
for (const id of ["st-scores", "st-k", "st-shift"]) $(id).addEventListener("input", runSoftThreshold);
$("mem-run").addEventListener("click", runMemory);
$("mb-run").addEventListener("click", runMembership);
runSoftThreshold();
runMemory();
