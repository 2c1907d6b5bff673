import init, {
  rayleigh_distance,
  min_range,
  focusing_field,
  csi_real_plane,
  attention_row,
} from "./pkg/nfcsi_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// Piecewise-linear dark-blue → teal → yellow colormap on [0, 1].
const STOPS = [[13, 8, 135], [33, 145, 140], [253, 231, 37]];
function color(t) {
  const x = Math.min(1, Math.max(0, t)) * (STOPS.length - 1);
  const i = Math.min(STOPS.length - 2, Math.floor(x));
  const f = x - i;
  return STOPS[i].map((a, k) => Math.round(a + f * (STOPS[i + 1][k] - a)));
}

function paint(canvas, values, rows, cols, scale = 1) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(cols, rows);
  values.forEach((v, k) => {
    const [r, g, b] = color(v / scale);
    img.data.set([r, g, b, 255], 4 * k);
  });
  const tmp = new OffscreenCanvas(cols, rows);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function show(id, digits) {
  $(`${id}-out`).textContent = num(id).toFixed(digits);
}

function updateRayleigh() {
  show("rd-n", 0);
  show("rd-l", 3);
  const n = num("rd-n"), l = num("rd-l");
  $("rd-out").textContent = `${rayleigh_distance(n, l).toFixed(3)} m`;
  $("rd-min").textContent = `${min_range(n, l).toFixed(3)} m`;
}

const FIELD = { rows: 90, cols: 90, span: 1.2 };
function updateField() {
  ["cf-n", "cf-r", "cf-t"].forEach((id, i) => show(id, [0, 1, 2][i]));
  const n = num("cf-n"), lambda = 0.01;
  const rMin = Math.max(min_range(n, lambda) * 1.01, 0.2);
  const rMax = Math.max(4 * num("cf-r"), rMin * 2);
  const values = focusing_field(n, lambda, num("cf-r"), num("cf-t"), rMin, rMax, FIELD.span, FIELD.rows, FIELD.cols);
  paint($("cf-canvas"), values, FIELD.rows, FIELD.cols);
  $("cf-axes").innerHTML =
    `range ${rMin.toFixed(2)} m (top) to ${rMax.toFixed(1)} m (bottom)<br>` +
    `angle ±${FIELD.span} rad<br>Rayleigh distance ${rayleigh_distance(n, lambda).toFixed(1)} m`;
}

const SIDE = 16;
let query = SIDE * 8 + 8;
function updateAttention() {
  ["at-r", "at-t", "at-p"].forEach((id) => show(id, 2));
  const [r, t, p] = [num("at-r"), num("at-t"), num("at-p")];
  paint($("at-image"), csi_real_plane(r, t, p), 32, 32);
  const row = attention_row(r, t, p, num("at-s") >>> 0, query);
  const max = Math.max(...row);
  paint($("at-map"), row, SIDE, SIDE, max);
  const ctx = $("at-map").getContext("2d");
  const cell = $("at-map").width / SIDE;
  ctx.strokeStyle = "#f0f";
  ctx.lineWidth = 2;
  ctx.strokeRect((query % SIDE) * cell, Math.floor(query / SIDE) * cell, cell, cell);
  $("at-q").textContent = `${Math.floor(query / SIDE)}, ${query % SIDE}`;
  $("at-max").textContent = max.toFixed(4);
}

function guarded(fn) {
  return () => {
    try {
      fn();
      $("status").textContent = "";
    } catch (e) {
      $("status").textContent = `Error: ${e}`;
    }
  };
}

await init();
const rayleigh = guarded(updateRayleigh);
const field = guarded(updateField);
const attention = guarded(updateAttention);
["rd-n", "rd-l"].forEach((id) => $(id).addEventListener("input", rayleigh));
["cf-n", "cf-r", "cf-t"].forEach((id) => $(id).addEventListener("change", field));
["cf-n", "cf-r", "cf-t"].forEach((id) => $(id).addEventListener("input", () => show(id, id === "cf-n" ? 0 : id === "cf-r" ? 1 : 2)));
["at-r", "at-t", "at-p", "at-s"].forEach((id) => $(id).addEventListener("change", attention));
$("at-map").addEventListener("click", (ev) => {
  const rect = ev.target.getBoundingClientRect();
  const col = Math.floor(((ev.clientX - rect.left) / rect.width) * SIDE);
  const rowIndex = Math.floor(((ev.clientY - rect.top) / rect.height) * SIDE);
  query = Math.min(SIDE - 1, rowIndex) * SIDE + Math.min(SIDE - 1, col);
  attention();
});
rayleigh();
field();
attention();
