/**
 * DOM wiring: compose a session (image + painted mask + optional depth),
 * steer the transform sliders with live previews, dispatch edit jobs, and
 * watch them converge.  All computation happens server-side; this file only
 * moves pixels between <canvas> elements and the HTTP API.
 */
import { Api, ApiError } from "./api.js";
import { drawChart, TERM_COLORS } from "./charts.js";
import { MaskModel } from "./mask.js";
import { JobMonitor, lossSeries } from "./polling.js";
import { RateLimiter } from "./rate.js";
import { DEFAULT_SLIDERS, buildTransform, clampSliders, } from "./transform.js";
const api = new Api("");
const $ = (id) => document.getElementById(id);
// --- state -----------------------------------------------------------------
let imageCanvas;
let maskCanvas;
let mask = null;
let imageB64 = null;
let depthB64 = null;
let sessionId = null;
let sliders = { ...DEFAULT_SLIDERS };
let brushValue = 1;
let brushSize = 8;
let painting = false;
let lastPoint = null;
const monitor = new JobMonitor({
    fetchState: (id) => api.jobState(id),
    onUpdate: renderJobState,
    onTerminal: onJobTerminal,
});
// --- helpers -----------------------------------------------------------------
function status(msg, kind = "info") {
    const el = $("status");
    el.textContent = msg;
    el.className = kind;
}
function canvasToB64(canvas) {
    return canvas.toDataURL("image/png").split(",")[1];
}
function maskToB64() {
    const c = document.createElement("canvas");
    c.width = mask.width;
    c.height = mask.height;
    const ctx = c.getContext("2d");
    const img = ctx.createImageData(mask.width, mask.height);
    for (let i = 0; i < mask.data.length; i++) {
        const v = mask.data[i] ? 255 : 0;
        img.data[4 * i] = img.data[4 * i + 1] = img.data[4 * i + 2] = v;
        img.data[4 * i + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
    return canvasToB64(c);
}
function redrawMaskOverlay() {
    if (!mask)
        return;
    const ctx = maskCanvas.getContext("2d");
    const img = ctx.createImageData(mask.width, mask.height);
    for (let i = 0; i < mask.data.length; i++) {
        if (mask.data[i]) {
            img.data[4 * i] = 255;
            img.data[4 * i + 1] = 140;
            img.data[4 * i + 2] = 0;
            img.data[4 * i + 3] = 110;
        }
    }
    ctx.clearRect(0, 0, maskCanvas.width, maskCanvas.height);
    ctx.putImageData(img, 0, 0);
    updateDispatchGate();
}
function updateDispatchGate() {
    const btn = $("dispatch");
    const empty = !mask || mask.isEmpty();
    btn.disabled = empty || sessionId === null || monitor.busy;
    $("mask-hint").textContent = empty
        ? "paint a mask before dispatching"
        : `${mask.paintedPixels()} px masked`;
}
// --- image/mask loading -------------------------------------------------------
function loadImageFile(file) {
    const url = URL.createObjectURL(file);
    const img = new Image();
    img.onload = () => {
        imageCanvas.width = maskCanvas.width = img.width;
        imageCanvas.height = maskCanvas.height = img.height;
        imageCanvas.getContext("2d").drawImage(img, 0, 0);
        imageB64 = canvasToB64(imageCanvas);
        mask = new MaskModel(img.width, img.height);
        sessionId = null;
        redrawMaskOverlay();
        status(`image ${img.width}x${img.height} loaded; paint the object mask`);
        URL.revokeObjectURL(url);
    };
    img.src = url;
}
function loadMaskFile(file) {
    if (!mask)
        return;
    const url = URL.createObjectURL(file);
    const img = new Image();
    img.onload = () => {
        const c = document.createElement("canvas");
        c.width = mask.width;
        c.height = mask.height;
        const ctx = c.getContext("2d");
        ctx.drawImage(img, 0, 0, mask.width, mask.height);
        const data = ctx.getImageData(0, 0, mask.width, mask.height).data;
        const lum = new Uint8Array(mask.width * mask.height);
        for (let i = 0; i < lum.length; i++) {
            lum[i] = Math.max(data[4 * i], data[4 * i + 1], data[4 * i + 2]);
        }
        mask.loadFromLuminance(lum);
        redrawMaskOverlay();
        URL.revokeObjectURL(url);
    };
    img.src = url;
}
async function loadDepthFile(file) {
    const buf = new Uint8Array(await file.arrayBuffer());
    let bin = "";
    buf.forEach((b) => (bin += String.fromCharCode(b)));
    depthB64 = btoa(bin);
    $("depth-state").textContent = `depth: ${file.name}`;
    sliders.depthSource = "file";
    syncSliderLabels();
}
// --- painting ------------------------------------------------------------------
function canvasPoint(ev) {
    const rect = maskCanvas.getBoundingClientRect();
    return {
        x: ((ev.clientX - rect.left) / rect.width) * maskCanvas.width,
        y: ((ev.clientY - rect.top) / rect.height) * maskCanvas.height,
    };
}
function bindPainting() {
    maskCanvas.addEventListener("pointerdown", (ev) => {
        if (!mask)
            return;
        painting = true;
        mask.beginStroke();
        const p = canvasPoint(ev);
        mask.stamp(p.x, p.y, brushSize, brushValue);
        lastPoint = p;
        redrawMaskOverlay();
    });
    maskCanvas.addEventListener("pointermove", (ev) => {
        if (!painting || !mask || !lastPoint)
            return;
        const p = canvasPoint(ev);
        mask.stroke(lastPoint.x, lastPoint.y, p.x, p.y, brushSize, brushValue);
        lastPoint = p;
        redrawMaskOverlay();
    });
    for (const evName of ["pointerup", "pointerleave"]) {
        maskCanvas.addEventListener(evName, () => {
            painting = false;
            lastPoint = null;
            mask?.endStroke();
        });
    }
}
// --- preview ----------------------------------------------------------------------
const previewLimiter = new RateLimiter(async () => {
    if (!sessionId)
        return;
    const t = buildTransform(sliders);
    try {
        const res = await api.preview(sessionId, t);
        setImg("preview-overlay", res.warp_overlay);
        setImg("preview-mobjt", res.m_obj_t);
        setImg("preview-disocc", res.m_disocc);
        $("preview-stale").hidden = true;
    }
    catch (err) {
        status(`preview failed: ${err.message}`, "error");
    }
}, 5);
function setImg(id, b64) {
    $(id).src = `data:image/png;base64,${b64}`;
}
function requestPreview() {
    $("preview-stale").hidden = false; // flags the preview as stale until it lands
    previewLimiter.request();
}
const SLIDER_SPECS = [
    { id: "sl-dx", key: "dx", label: (v) => `dx ${v} px` },
    { id: "sl-dy", key: "dy", label: (v) => `dy ${v} px` },
    { id: "sl-scale2d", key: "scale2d", label: (v) => `scale x${v.toFixed(2)}` },
    { id: "sl-angle", key: "angleDeg", label: (v) => `angle ${v} deg` },
    { id: "sl-tx", key: "tx", label: (v) => `tx ${v.toFixed(3)} m` },
    { id: "sl-ty", key: "ty", label: (v) => `ty ${v.toFixed(3)} m` },
    { id: "sl-tz", key: "tz", label: (v) => `tz ${v.toFixed(3)} m` },
    { id: "sl-scale3d", key: "scale3d", label: (v) => `scale x${v.toFixed(2)}` },
];
function syncSliderLabels() {
    for (const spec of SLIDER_SPECS) {
        const el = $(spec.id);
        const v = sliders[spec.key];
        el.value = String(v);
        $(spec.id + "-label").textContent = spec.label(v);
    }
    $("transform-json").textContent = JSON.stringify(buildTransform(sliders), null, 1);
    const is3d = sliders.mode === "3d";
    $("panel-2d").hidden = sliders.mode !== "2d";
    $("panel-3d").hidden = !is3d;
    $("depth-row").hidden = !is3d;
    $("mode-" + sliders.mode).checked = true;
    const removeOn = sliders.mode === "remove";
    for (const spec of SLIDER_SPECS) {
        $(spec.id).disabled = removeOn;
    }
}
function bindSliders() {
    for (const spec of SLIDER_SPECS) {
        const el = $(spec.id);
        el.addEventListener("input", () => {
            sliders[spec.key] = parseFloat(el.value);
            const { state, clamped } = clampSliders(sliders);
            sliders = state;
            el.classList.toggle("clamped", clamped);
            syncSliderLabels();
            requestPreview();
        });
    }
    for (const mode of ["2d", "3d", "remove"]) {
        $("mode-" + mode).addEventListener("change", () => {
            sliders.mode = mode;
            syncSliderLabels();
            requestPreview();
        });
    }
    $("sl-axis").addEventListener("change", (ev) => {
        sliders.axis = ev.target.value;
        syncSliderLabels();
        requestPreview();
    });
    $("depth-source").addEventListener("change", (ev) => {
        sliders.depthSource = ev.target.value;
        syncSliderLabels();
        requestPreview();
    });
}
// --- session/job flow ------------------------------------------------------------------
async function createSession() {
    if (!imageB64 || !mask) {
        status("load an image first", "error");
        return;
    }
    if (mask.isEmpty()) {
        status("paint a mask before creating the session", "error");
        return;
    }
    status("creating session (inversion runs once in the background)...");
    try {
        const { session_id } = await api.createSession(imageB64, maskToB64(), depthB64, parseInt($("steps").value, 10));
        sessionId = session_id;
        $("session-state").textContent = `session ${session_id}: inverting`;
        const poll = setInterval(async () => {
            const st = await api.sessionState(session_id);
            $("session-state").textContent = `session ${session_id}: ${st.state}`;
            if (st.state !== "inverting") {
                clearInterval(poll);
                if (st.state === "failed")
                    status(`inversion failed: ${st.error}`, "error");
                else {
                    status("session ready; previews and edits are live");
                    requestPreview();
                }
            }
        }, 1000);
    }
    catch (err) {
        status(`session failed: ${err.message}`, "error");
    }
    updateDispatchGate();
}
async function dispatchEdit() {
    if (!sessionId || !mask || mask.isEmpty() || monitor.busy)
        return;
    const config = {
        transform: buildTransform(sliders),
        steps: parseInt($("steps").value, 10),
        diagnostics: true,
    };
    try {
        const { job_id } = await api.submitEdit(sessionId, config);
        monitor.start(job_id);
        $("job-state").textContent = `job ${job_id}: queued`;
        status(`dispatched job ${job_id}`);
        const interval = setInterval(async () => {
            await monitor.tick();
            if (!monitor.busy)
                clearInterval(interval);
        }, 1000);
    }
    catch (err) {
        if (err instanceof ApiError && err.status === 409) {
            status("session is busy (still inverting, or an edit is running)", "error");
        }
        else {
            status(`dispatch failed: ${err.message}`, "error");
        }
    }
    updateDispatchGate();
}
function renderJobState(state) {
    $("job-state").textContent =
        `job ${state.job_id}: ${state.state} (${Math.round(state.progress * 100)}%)`;
    const series = lossSeries(state.loss_curves);
    drawChart($("chart-loss"), [...series.entries()].map(([term, points]) => ({
        label: term, points, color: TERM_COLORS[term] ?? "#ccc",
    })), "loss");
    drawChart($("chart-wremove"), [{ label: "w_remove", points: state.w_remove.map(r => ({ step: r.step, value: r.w_remove })), color: "#e74c3c" }], "removal weight");
}
async function onJobTerminal(state) {
    updateDispatchGate();
    if (state.state !== "done") {
        status(`job failed: ${state.error ?? "unknown error"}`, "error");
        return;
    }
    try {
        const res = await api.jobResult(state.job_id);
        setImg("result-edited", res.edited);
        setImg("result-baseline", res.baseline);
        $("warp-badge").textContent =
            res.warp_error === null ? "warp error: n/a"
                : `warp error: ${res.warp_error.toFixed(4)}`
                    + (res.warp_error_input !== null
                        ? ` (input ${res.warp_error_input.toFixed(4)})` : "");
        setupAttentionBrowser(state.job_id, res.diagnostics.attention);
        status("job done");
    }
    catch (err) {
        status(`result fetch failed: ${err.message}`, "error");
    }
}
function setupAttentionBrowser(jobId, index) {
    const steps = [...new Set(index.map((e) => e.step))].sort((a, b) => a - b);
    const blocks = [...new Set(index.map((e) => e.block))].sort();
    if (!steps.length)
        return;
    const stepEl = $("attn-step");
    const blockEl = $("attn-block");
    stepEl.min = String(0);
    stepEl.max = String(steps.length - 1);
    stepEl.value = "0";
    blockEl.innerHTML = blocks.map((b) => `<option>${b}</option>`).join("");
    const refresh = () => {
        const step = steps[parseInt(stepEl.value, 10)];
        $("attn-step-label").textContent = `step ${step}`;
        $("attn-img").src = api.attentionUrl(jobId, step, blockEl.value);
    };
    stepEl.oninput = refresh;
    blockEl.onchange = refresh;
    $("attn-pane").hidden = false;
    refresh();
}
// --- boot ------------------------------------------------------------------------------
export function boot() {
    imageCanvas = $("image-canvas");
    maskCanvas = $("mask-canvas");
    bindPainting();
    bindSliders();
    syncSliderLabels();
    $("file-image").addEventListener("change", (ev) => {
        const f = ev.target.files?.[0];
        if (f)
            loadImageFile(f);
    });
    $("file-mask").addEventListener("change", (ev) => {
        const f = ev.target.files?.[0];
        if (f)
            loadMaskFile(f);
    });
    $("file-depth").addEventListener("change", (ev) => {
        const f = ev.target.files?.[0];
        if (f)
            void loadDepthFile(f);
    });
    $("brush-size").addEventListener("input", (ev) => {
        brushSize = parseInt(ev.target.value, 10);
        $("brush-size-label").textContent = `brush ${brushSize} px`;
    });
    $("brush-paint").addEventListener("click", () => (brushValue = 1));
    $("brush-erase").addEventListener("click", () => (brushValue = 0));
    $("mask-clear").addEventListener("click", () => {
        mask?.fillAll(0);
        redrawMaskOverlay();
    });
    $("mask-fill").addEventListener("click", () => {
        mask?.fillAll(1);
        redrawMaskOverlay();
    });
    $("mask-undo").addEventListener("click", () => {
        if (mask?.undo())
            redrawMaskOverlay();
    });
    $("create-session").addEventListener("click", () => void createSession());
    $("dispatch").addEventListener("click", () => void dispatchEdit());
    updateDispatchGate();
    status("load an image to begin");
}
if (typeof document !== "undefined") {
    window.addEventListener("DOMContentLoaded", boot);
}
