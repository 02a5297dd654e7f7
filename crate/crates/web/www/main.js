import init, { referenceModel, ruinCurve, laplaceCurve, limitCurve } from "./pkg/ouruin_web.js";

const $ = (id) => document.getElementById(id);
const colors = { ruin: "#1f4e99", jump: "#c0392b", creep: "#27894a", laplace: "#1f4e99", limit: "#1f4e99" };

function draw(curve, xlabel) {
  const cv = $("plot");
  const g = cv.getContext("2d");
  const pad = 40;
  const w = cv.width - 2 * pad;
  const h = cv.height - 2 * pad;
  g.clearRect(0, 0, cv.width, cv.height);

  const xs = curve.x;
  const names = Object.keys(curve.series);
  const all = names.flatMap((k) => curve.series[k]);
  const ymax = Math.max(...all, 1e-12);
  const x0 = xs[0];
  const x1 = xs[xs.length - 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0)) * w;
  const py = (y) => pad + h - (y / ymax) * h;

  g.strokeStyle = "#888";
  g.beginPath();
  g.moveTo(pad, pad);
  g.lineTo(pad, pad + h);
  g.lineTo(pad + w, pad + h);
  g.stroke();
  g.fillStyle = "#444";
  g.font = "12px sans-serif";
  g.fillText(ymax.toPrecision(3), 2, pad + 4);
  g.fillText("0", pad - 12, pad + h + 4);
  g.fillText(x0.toFixed(2), pad, pad + h + 16);
  g.fillText(x1.toFixed(2), pad + w - 24, pad + h + 16);
  g.fillText(xlabel, pad + w / 2, pad + h + 30);

  for (const k of names) {
    g.strokeStyle = colors[k] ?? "#000";
    g.lineWidth = 2;
    g.beginPath();
    curve.series[k].forEach((y, i) => (i ? g.lineTo(px(xs[i]), py(y)) : g.moveTo(px(xs[i]), py(y))));
    g.stroke();
  }
  $("legend").innerHTML = names
    .map((k) => `<span style="color:${colors[k]}">&#9644; ${k}</span>`)
    .join("");
}

function run() {
  const op = document.querySelector("input[name=op]:checked").value;
  const model = $("model").value;
  const level = Number($("level").value);
  const start = Number($("start").value);
  const to = Number($("to").value);
  const n = Number($("n").value);
  $("status").textContent = "";
  try {
    const t = performance.now();
    let json;
    let xlabel = "start";
    if (op === "ruin") {
      json = ruinCurve(model, level, level > 0 ? level + 0.05 : 0, to, n);
    } else if (op === "laplace") {
      json = laplaceCurve(model, start, level, to, n);
      xlabel = "zeta";
    } else {
      json = limitCurve(model, 0.05, to, n);
    }
    draw(JSON.parse(json), xlabel);
    $("status").style.color = "#555";
    $("status").textContent = `${n} points in ${(performance.now() - t).toFixed(0)} ms`;
  } catch (e) {
    $("status").style.color = "#a00";
    $("status").textContent = String(e.message ?? e);
  }
}

await init();
$("model").value = referenceModel();
$("draw").addEventListener("click", run);
run();
