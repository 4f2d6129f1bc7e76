import init, { Explorer, sh_basis_image } from "./pkg/lumenforge_web.js";

const $ = (id) => document.getElementById(id);
let explorer = null;

function colormap(t) {
  const v = Math.max(0, Math.min(1, t));
  return [Math.round(255 * Math.min(1, 2 * v)), Math.round(255 * v * v), Math.round(255 * (1 - v) * 0.6)];
}

function paint(canvas, values, w, h, lo, hi, flipY) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(w, h);
  for (let r = 0; r < h; r++) {
    const src = flipY ? h - 1 - r : r;
    for (let c = 0; c < w; c++) {
      const [R, G, B] = colormap((values[src * w + c] - lo) / (hi - lo || 1));
      const k = 4 * (r * w + c);
      img.data.set([R, G, B, 255], k);
    }
  }
  const tmp = document.createElement("canvas");
  tmp.width = w;
  tmp.height = h;
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawProfiles(profiles) {
  const cv = $("profile");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const all = profiles.flatMap((p) => p.r);
  const rmin = Math.min(...all) * 0.95;
  const rmax = Math.max(...all) * 1.05;
  const tmax = Math.max(...profiles[0].theta);
  const colors = ["#c33", "#393", "#36c"];
  profiles.forEach((p, i) => {
    ctx.strokeStyle = colors[i];
    ctx.beginPath();
    p.theta.forEach((t, j) => {
      const x = 30 + (cv.width - 40) * (t / tmax);
      const y = cv.height - 20 - (cv.height - 30) * ((p.r[j] - rmin) / (rmax - rmin));
      j ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = colors[i];
    ctx.fillText(`φ=${p.phi_deg}°`, cv.width - 60, 14 + 12 * i);
  });
  ctx.fillStyle = "#444";
  ctx.fillText(`${rmax.toFixed(1)} mm`, 2, 10);
  ctx.fillText(`${rmin.toFixed(1)} mm`, 2, cv.height - 22);
}

function params() {
  return Float64Array.from([...document.querySelectorAll("#sliders input")].map((s) => Number(s.value)));
}

function redesign() {
  try {
    const d = JSON.parse(explorer.design(params()));
    $("extrap").hidden = !d.extrapolation;
    drawProfiles(d.profiles);
    $("status").textContent = "";
  } catch (e) {
    $("status").textContent = `design failed: ${e.message ?? e}`;
  }
}

function trace() {
  $("metric").textContent = "tracing...";
  setTimeout(() => {
    try {
      const t = JSON.parse(explorer.evaluate(params(), Number($("rays").value), 1));
      const hi = Math.max(...t.values);
      paint($("heat"), t.values, t.grid_n, t.grid_n, 0, hi, true);
      $("metric").textContent = `non-uniformity ${t.nonuniformity_pct.toFixed(2)} %, spill ${(100 * t.spill_fraction).toFixed(1)} %`;
    } catch (e) {
      $("metric").textContent = `trace failed: ${e.message ?? e}`;
    }
  }, 0);
}

function loadModel(text) {
  explorer = new Explorer(text);
  const names = explorer.paramNames();
  const box = explorer.trainingBox();
  const host = $("sliders");
  host.innerHTML = "";
  names.forEach((name, i) => {
    const lo = box[2 * i];
    const hi = box[2 * i + 1];
    const span = hi - lo;
    // explorable range reaches past the training box on both sides
    const min = name === "x" || name === "y" ? lo - 0.5 * span : Math.max(1, lo - 0.5 * span);
    const max = hi + span;
    const row = document.createElement("div");
    row.innerHTML = `<label>${name}</label> <input type="range" min="${min}" max="${max}" step="${span / 100}" value="${(lo + hi) / 2}"> <output></output> mm`;
    const input = row.querySelector("input");
    const out = row.querySelector("output");
    out.textContent = input.value;
    input.addEventListener("input", () => {
      out.textContent = Number(input.value).toFixed(0);
      redesign();
    });
    host.appendChild(row);
  });
  $("scenario").textContent = explorer.scenario();
  $("controls").hidden = false;
  redesign();
}

function drawBasis() {
  const l = Number($("sh-l").value);
  const m = Number($("sh-m").value);
  try {
    const v = sh_basis_image(l, m, 64);
    const a = Math.max(...v.map(Math.abs)) || 1;
    paint($("basis"), v, 128, 64, -a, a, false);
  } catch (e) {
    $("status").textContent = e.message ?? String(e);
  }
}

await init();
$("trace").addEventListener("click", trace);
$("sh-l").addEventListener("input", drawBasis);
$("sh-m").addEventListener("input", drawBasis);
$("model-file").addEventListener("change", async (ev) => {
  const f = ev.target.files[0];
  if (!f) return;
  try {
    loadModel(await f.text());
  } catch (e) {
    $("status").textContent = `bad model: ${e.message ?? e}`;
  }
});
drawBasis();
try {
  const resp = await fetch("model.json");
  if (resp.ok) loadModel(await resp.text());
  $("status").textContent = explorer ? "" : "choose a model file";
} catch {
  $("status").textContent = "choose a model file";
}
