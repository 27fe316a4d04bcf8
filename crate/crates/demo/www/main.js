import init, { quadricSlice, mixtureSlice, ellipsoidComparison } from "./pkg/quadmix_demo.js";

const SIZE = 128;
const HALF = 3;

function values(form) {
  const v = {};
  for (const el of form.querySelectorAll("input, select")) {
    v[el.name] = el.type === "checkbox" ? el.checked : Number(el.value);
    const out = el.parentElement.querySelector("output");
    if (out) out.textContent = el.value;
  }
  return v;
}

function paint(canvas, rgba, width, height) {
  const img = new ImageData(new Uint8ClampedArray(rgba.buffer, rgba.byteOffset, width * height * 4), width, height);
  const tmp = new OffscreenCanvas(width, height);
  tmp.getContext("2d").putImageData(img, 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function guarded(fn) {
  return () => {
    try {
      fn();
      document.getElementById("error").textContent = "";
    } catch (e) {
      document.getElementById("error").textContent = String(e);
    }
  };
}

const views = {
  slice: guarded(() => {
    const v = values(document.getElementById("slice"));
    const rgba = quadricSlice(v.eps1, v.eps2, v.sx, v.sy, v.sz, v.yaw, v.literal, SIZE, HALF, v.axis, v.offset);
    paint(document.getElementById("slice-canvas"), rgba, SIZE, SIZE);
  }),
  mixture: guarded(() => {
    const v = values(document.getElementById("mixture"));
    const rgba = mixtureSlice(v.count, v.seed, v.lo, v.hi, v.scaled, SIZE, 6, v.offset);
    paint(document.getElementById("mixture-canvas"), rgba, SIZE, SIZE);
  }),
  compare: guarded(() => {
    const v = values(document.getElementById("compare"));
    const bytes = ellipsoidComparison(v.sx, v.sy, v.sz, v.yaw, SIZE, HALF, 0);
    const n = SIZE * SIZE * 2 * 4;
    paint(document.getElementById("compare-canvas"), bytes.subarray(0, n), SIZE * 2, SIZE);
    const gap = new DataView(bytes.buffer, bytes.byteOffset + n, 8).getFloat64(0, true);
    document.getElementById("gap").textContent = gap.toExponential(2);
  }),
};

await init();
for (const [id, draw] of Object.entries(views)) {
  document.getElementById(id).addEventListener("input", draw);
  draw();
}
