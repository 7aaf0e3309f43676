import init, { truncated_normal_histogram, Fit } from "./pkg/threepart_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let fit = null;

function fail(el, e) {
  el.innerHTML = `<p class="err">${e.message ?? e}</p>`;
}

function axes(ctx, w, h, pad, xr, yr) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, 10, w - pad - 10, h - pad - 10);
  ctx.fillStyle = "#444";
  ctx.font = "11px system-ui";
  ctx.fillText(xr[0].toFixed(2), pad, h - pad + 14);
  ctx.fillText(xr[1].toFixed(2), w - 40, h - pad + 14);
  ctx.fillText(yr[1].toPrecision(3), 2, 18);
  ctx.fillText(yr[0].toPrecision(3), 2, h - pad);
  const sx = (x) => pad + ((x - xr[0]) / (xr[1] - xr[0])) * (w - pad - 10);
  const sy = (y) => h - pad - ((y - yr[0]) / (yr[1] - yr[0])) * (h - pad - 20);
  return [sx, sy];
}

function histogram() {
  const out = $("tn-out");
  try {
    const h = JSON.parse(truncated_normal_histogram(
      num("tn-mean"), num("tn-var"), num("tn-lo"), Number($("tn-hi").value), num("tn-n"), 40, 7));
    out.textContent = `sample mean ${h.mean.toFixed(5)}, exact ${h.exact_mean.toFixed(5)}`;
    const c = $("tn-plot"), ctx = c.getContext("2d");
    const top = Math.max(...h.counts, ...h.expected);
    const [sx, sy] = axes(ctx, c.width, c.height, 40, [h.edges[0], h.edges.at(-1)], [0, top]);
    ctx.fillStyle = "#9bc";
    h.counts.forEach((n, i) => {
      const x0 = sx(h.edges[i]), x1 = sx(h.edges[i + 1]);
      ctx.fillRect(x0, sy(n), x1 - x0 - 1, sy(0) - sy(n));
    });
    ctx.strokeStyle = "#c33";
    ctx.beginPath();
    h.expected.forEach((e, i) => {
      const x = sx((h.edges[i] + h.edges[i + 1]) / 2);
      i ? ctx.lineTo(x, sy(e)) : ctx.moveTo(x, sy(e));
    });
    ctx.stroke();
  } catch (e) {
    fail(out, e);
  }
}

function runFit() {
  const out = $("fit-out");
  out.textContent = "sampling…";
  // let the message paint before the sampler blocks the thread
  setTimeout(() => {
    try {
      fit?.free();
      fit = new Fit(num("fit-n"), num("fit-it"), num("fit-burn"),
        num("fit-ac"), num("fit-ay"), num("fit-cy"), num("fit-seed"));
      const s = JSON.parse(fit.summary());
      const rows = s.parameters.map((p) =>
        `<tr><td>${p.name}</td><td>${p.truth.toFixed(3)}</td><td>${p.mean.toFixed(3)}</td><td>${p.sd.toFixed(3)}</td></tr>`);
      out.innerHTML =
        `<p>groups (no access / access, no use / use): ${s.group_counts.join(" / ")}; ${s.draws} retained draws</p>` +
        `<table><tr><th>parameter</th><th>truth</th><th>posterior mean</th><th>sd</th></tr>${rows.join("")}</table>`;
      $("cv-go").disabled = false;
    } catch (e) {
      fit = null;
      $("cv-go").disabled = true;
      fail(out, e);
    }
  }, 20);
}

function curve() {
  const out = $("cv-out");
  try {
    const xs = Array.from({ length: 21 }, (_, i) => -2 + i * 0.2);
    const k = num("cv-k"), mc = num("cv-mc");
    const pts = JSON.parse(fit.curve(k, new Float64Array(xs), false, mc, 3));
    const series = [
      ["P(access)", "#27a", pts.map((p) => p.p_access.mean)],
      ["P(use)", "#c33", pts.map((p) => p.p_use.mean)],
      ["P(use | access)", "#3a3", pts.map((p) => p.p_use_given_access.mean)],
    ];
    const c = $("cv-plot"), ctx = c.getContext("2d");
    const [sx, sy] = axes(ctx, c.width, c.height, 40, [xs[0], xs.at(-1)], [0, 1]);
    series.forEach(([name, color, ys], j) => {
      ctx.strokeStyle = color;
      ctx.beginPath();
      ys.forEach((y, i) => (i ? ctx.lineTo(sx(xs[i]), sy(y)) : ctx.moveTo(sx(xs[i]), sy(y))));
      ctx.stroke();
      ctx.fillStyle = color;
      ctx.fillText(name, 60, 26 + 14 * j);
    });
    const mid = pts[10];
    out.textContent = `at x = 0: expected quantity given use ${mid.consumption.mean.toFixed(3)} ` +
      `(posterior sd ${mid.consumption.sd.toFixed(3)})`;
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("tn-go").onclick = histogram;
$("fit-go").onclick = runFit;
$("cv-go").onclick = curve;
histogram();
