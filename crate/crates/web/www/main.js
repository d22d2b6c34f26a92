import init, { paramCount, synthSlice, metrics } from "./pkg/evl_web.js";

const $ = (id) => document.getElementById(id);

function show(out, f) {
  try {
    out.textContent = f();
  } catch (e) {
    out.textContent = "error: " + e;
  }
}

function draw() {
  const size = 64;
  const canvas = $("sy-canvas");
  const ctx = canvas.getContext("2d");
  let px;
  try {
    px = synthSlice($("sy-label").value, Number($("sy-seed").value), size);
  } catch (e) {
    ctx.fillText(String(e), 2, 10);
    return;
  }
  const img = ctx.createImageData(size, size);
  for (let i = 0; i < px.length; i++) {
    const v = Math.max(0, Math.min(255, Math.round(px[i] * 200)));
    img.data.set([v, v, v, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

await init();
$("pc-go").onclick = () =>
  show($("pc-out"), () =>
    paramCount($("pc-model").value, $("pc-scale").value === "reference", Number($("pc-rank").value), $("pc-place").value));
$("sy-go").onclick = draw;
$("mx-go").onclick = () => show($("mx-out"), () => metrics($("mx-in").value));
$("pc-go").click();
draw();
$("mx-go").click();
