import init, { plantedRecovery, sweepGrid, attributionImage, channelThumbnails } from "./pkg/inflens_web.js";

const recoveryForm = document.querySelector("#recovery form");
const sweepForm = document.querySelector("#sweep form");
const attribForm = document.querySelector("#attrib form");

function spec() {
  const f = new FormData(recoveryForm);
  const n = (k) => Number(f.get(k));
  return { classes: n("classes"), width: n("width"), planted: n("planted"), n: n("n"),
           signal: n("signal"), k1: n("k1"), k2: n("k2"), seed: n("seed") };
}

function runRecovery() {
  const s = spec();
  const summary = document.getElementById("recovery-summary");
  const bars = document.getElementById("recovery-bars");
  let out;
  try {
    out = JSON.parse(plantedRecovery(s.classes, s.width, s.planted, s.n, s.signal, s.k1, s.k2, s.seed));
  } catch (e) {
    summary.textContent = String(e.message ?? e);
    summary.className = "error";
    bars.replaceChildren();
    return;
  }
  const exact = out.classes.filter((c) => c.planted.join() === c.recovered.join()).length;
  const rA = out.r_A === null ? "undefined" : out.r_A.toFixed(4);
  summary.className = "summary";
  summary.textContent = `A_f ${out.A_f.toFixed(4)}   A_d ${out.A_d.toFixed(4)}   r_A ${rA}   ` +
    `exact recovery ${exact}/${out.classes.length}`;
  bars.replaceChildren(...out.classes.flatMap((c) => {
    const label = document.createElement("div");
    label.className = "class-label";
    label.textContent = `class ${c.label}: planted [${c.planted}] recovered [${c.recovered}]`;
    const row = document.createElement("div");
    row.className = "class-row";
    const max = Math.max(...c.counts, 1);
    c.counts.forEach((count, j) => {
      const bar = document.createElement("div");
      bar.className = "bar";
      if (c.planted.includes(j)) bar.classList.add("planted");
      if (c.recovered.includes(j)) bar.classList.add("recovered");
      bar.style.height = `${(100 * count) / max}%`;
      bar.title = `index ${j}: ${count} of ${c.instances}`;
      row.append(bar);
    });
    return [label, row];
  }));
}

function color(v) {
  // r_A in [0.5, 1] from red to green; lower values stay red
  const t = Math.max(0, Math.min(1, (v - 0.5) / 0.5));
  return `hsl(${Math.round(120 * t)}, 60%, ${45 + 10 * (1 - t)}%)`;
}

function runSweep(event) {
  event?.preventDefault();
  const s = spec();
  const f = new FormData(sweepForm);
  const canvas = document.getElementById("sweep-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let grid;
  try {
    grid = JSON.parse(sweepGrid(s.classes, s.width, s.planted, s.n, s.signal, f.get("k1"), f.get("k2"), s.seed));
  } catch (e) {
    ctx.fillStyle = "#b00";
    ctx.font = "14px monospace";
    ctx.fillText(String(e.message ?? e), 10, 20);
    return;
  }
  const pad = 44;
  const cw = (canvas.width - pad) / grid.k2.length;
  const ch = (canvas.height - pad) / grid.k1.length;
  ctx.font = "12px monospace";
  ctx.textAlign = "center";
  ctx.textBaseline = "middle";
  grid.k1.forEach((k1, i) => {
    grid.k2.forEach((k2, j) => {
      const v = grid.r_A[i * grid.k2.length + j];
      const x = pad + j * cw;
      const y = pad + i * ch;
      ctx.fillStyle = v === null ? "#ccc" : color(v);
      ctx.fillRect(x, y, cw - 1, ch - 1);
      if (v !== null) {
        ctx.fillStyle = "#000";
        ctx.fillText(v.toFixed(2), x + cw / 2, y + ch / 2);
      }
    });
    ctx.fillStyle = "#333";
    ctx.fillText(k1, pad / 2, pad + i * ch + ch / 2);
  });
  grid.k2.forEach((k2, j) => ctx.fillText(k2, pad + j * cw + cw / 2, pad / 2));
  ctx.fillText("k1 \\ k2", pad / 2, 12);
}

const M = 8;
const SIZE = 12;
const selected = new Set([0, 1]);

function paintGray(canvas, bytes, w, h) {
  const img = new ImageData(w, h);
  bytes.forEach((v, i) => img.data.set([v, v, v, 255], 4 * i));
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function drawThumbs() {
  const seed = Number(new FormData(attribForm).get("seed"));
  const px = channelThumbnails(M, SIZE, seed);
  const box = document.getElementById("thumbs");
  box.replaceChildren(...Array.from({ length: M }, (_, j) => {
    const c = document.createElement("canvas");
    c.width = SIZE;
    c.height = SIZE;
    c.title = `channel ${j}`;
    c.classList.toggle("on", selected.has(j));
    paintGray(c, px.subarray(j * SIZE * SIZE, (j + 1) * SIZE * SIZE), SIZE, SIZE);
    c.addEventListener("click", () => {
      selected.has(j) ? selected.delete(j) : selected.add(j);
      c.classList.toggle("on", selected.has(j));
      drawAttribution();
    });
    return c;
  }));
}

function drawAttribution() {
  const f = new FormData(attribForm);
  const canvas = document.getElementById("attrib-canvas");
  const err = document.getElementById("attrib-error");
  const channels = [...selected].sort((a, b) => a - b).join(",");
  if (!channels) {
    err.textContent = "select at least one channel";
    canvas.getContext("2d").clearRect(0, 0, canvas.width, canvas.height);
    return;
  }
  try {
    const px = attributionImage(M, SIZE, channels, canvas.width, f.get("cross") === "on", Number(f.get("seed")));
    paintGray(canvas, px, canvas.width, canvas.height);
    err.textContent = "";
  } catch (e) {
    err.textContent = String(e.message ?? e);
  }
}

await init();
recoveryForm.addEventListener("input", () => { runRecovery(); runSweep(); });
sweepForm.addEventListener("submit", runSweep);
attribForm.addEventListener("input", () => { drawThumbs(); drawAttribution(); });
runRecovery();
runSweep();
drawThumbs();
drawAttribution();
