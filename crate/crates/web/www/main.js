// Build: cargo build -p secci-web --release --target wasm32-unknown-unknown
//        wasm-bindgen --target web --out-dir www/pkg <target>/wasm32-unknown-unknown/release/secci_web.wasm
import init, { grid_sites, render_site_image, phase_scatter, greedy_explore } from "./pkg/secci_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

let sites = [];

function gridView(canvas, highlight, extra) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, pad = 30, span = 4.5;
  const px = (x) => pad + (x / span) * (w - 2 * pad);
  const py = (y) => w - pad - (y / span) * (w - 2 * pad);
  ctx.clearRect(0, 0, w, w);
  for (let i = 0; i < sites.length; i++) {
    const [x, y] = sites[i];
    ctx.fillStyle = i === highlight ? "#c00" : "#888";
    ctx.beginPath();
    ctx.arc(px(x), py(y), i === highlight ? 6 : 4, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillStyle = "#444";
    ctx.fillText(String(i), px(x) + 6, py(y) - 6);
  }
  if (extra) extra(ctx, px, py);
}

function renderImage() {
  try {
    const rgba = render_site_image(num("img-site"), num("img-seed"), num("img-k"), num("img-snr"));
    const ctx = $("img-canvas").getContext("2d");
    ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), 90, 90), 0, 0);
    gridView($("img-grid"), num("img-site"));
  } catch (e) {
    alert(e);
  }
}

function circularStd(xs) {
  let s = 0, c = 0;
  for (const x of xs) { s += Math.sin(x); c += Math.cos(x); }
  const r = Math.hypot(s, c) / xs.length;
  return Math.sqrt(-2 * Math.log(r));
}

function renderPhase() {
  try {
    const v = phase_scatter(num("ph-site"), num("ph-n"), num("ph-sc"), 1);
    const raw = [], diff = [];
    for (let i = 0; i < v.length; i += 2) { raw.push(v[i]); diff.push(v[i + 1]); }
    const canvas = $("ph-canvas"), ctx = canvas.getContext("2d");
    const c = canvas.width / 2, r = c - 20;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.strokeStyle = "#ccc";
    ctx.beginPath(); ctx.arc(c, c, r, 0, 2 * Math.PI); ctx.stroke();
    const dots = (xs, color, radius) => {
      ctx.fillStyle = color;
      for (const a of xs) {
        ctx.beginPath();
        ctx.arc(c + radius * Math.cos(a), c - radius * Math.sin(a), 2.5, 0, 2 * Math.PI);
        ctx.fill();
      }
    };
    dots(raw, "rgba(100,100,100,0.5)", r);
    dots(diff, "rgba(200,0,0,0.7)", r * 0.8);
    $("ph-stats").textContent =
      `circular STD, raw phase:        ${circularStd(raw).toFixed(3)} rad\n` +
      `circular STD, phase difference: ${circularStd(diff).toFixed(3)} rad`;
  } catch (e) {
    alert(e);
  }
}

function renderGreedy() {
  try {
    const out = JSON.parse(greedy_explore(num("gr-site"), num("gr-n"), num("gr-sharp"),
      num("gr-h"), num("gr-k"), $("gr-w").checked, num("gr-seed")));
    gridView($("gr-canvas"), num("gr-site"), (ctx, px, py) => {
      ctx.strokeStyle = "#06c";
      for (const s of out.support) {
        const [x, y] = sites[s.index];
        ctx.beginPath(); ctx.arc(px(x), py(y), 4 + 2 * s.frequency, 0, 2 * Math.PI); ctx.stroke();
      }
      ctx.fillStyle = "#06c";
      ctx.fillRect(px(out.estimate[0]) - 5, py(out.estimate[1]) - 5, 10, 10);
    });
    const rows = out.support.map((s) => `  site ${String(s.index).padStart(2)}  votes ${s.frequency}  mass ${s.mass.toFixed(3)}`);
    $("gr-out").textContent =
      `estimate (${out.estimate.map((v) => v.toFixed(2)).join(", ")})\n` +
      `error    ${out.error.toFixed(3)} m\n` +
      `shortfall ${out.shortfall}\nselected:\n${rows.join("\n")}`;
  } catch (e) {
    alert(e);
  }
}

await init();
const flat = grid_sites();
for (let i = 0; i < flat.length; i += 2) sites.push([flat[i], flat[i + 1]]);
$("img-go").onclick = renderImage;
$("ph-go").onclick = renderPhase;
for (const id of ["gr-site", "gr-n", "gr-sharp", "gr-h", "gr-k", "gr-w", "gr-seed"]) $(id).oninput = renderGreedy;
renderImage();
renderPhase();
renderGreedy();
