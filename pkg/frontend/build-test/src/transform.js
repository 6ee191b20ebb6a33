/**
 * Slider state -> EditTransform JSON.
 *
 * The server owns all transform math; this module only serializes what the
 * sliders say.  3D rotations travel as axis + angle and are compiled to a
 * rotation matrix server-side.
 */
export const DEFAULT_SLIDERS = {
    mode: "2d",
    dx: 0,
    dy: 0,
    scale2d: 1,
    pivotX: 0,
    pivotY: 0,
    axis: "z",
    angleDeg: 0,
    tx: 0,
    ty: 0,
    tz: 0,
    scale3d: 1,
    depthSource: "constant",
    constantDepth: 0.5,
};
export const LIMITS = {
    dx: [-64, 64],
    dy: [-64, 64],
    angleDeg: [-90, 90],
    scale: [0.25, 4],
    translation3d: [-0.5, 0.5],
};
const clamp = (v, lo, hi) => Math.min(hi, Math.max(lo, v));
/** Clamp out-of-range slider values; returns the clamped state and whether
 * anything had to change (so the UI can flash a cue). */
export function clampSliders(s) {
    const c = {
        ...s,
        dx: clamp(s.dx, ...LIMITS.dx),
        dy: clamp(s.dy, ...LIMITS.dy),
        angleDeg: clamp(s.angleDeg, ...LIMITS.angleDeg),
        scale2d: clamp(s.scale2d, ...LIMITS.scale),
        scale3d: clamp(s.scale3d, ...LIMITS.scale),
        tx: clamp(s.tx, ...LIMITS.translation3d),
        ty: clamp(s.ty, ...LIMITS.translation3d),
        tz: clamp(s.tz, ...LIMITS.translation3d),
        constantDepth: clamp(s.constantDepth, 0.05, 10),
    };
    const clamped = Object.keys(c).some((k) => c[k] !== s[k]);
    return { state: c, clamped };
}
function depthSource(s) {
    return s.depthSource === "file" ? "file" : `constant:${s.constantDepth}`;
}
/** The transform the current sliders describe. Neutral sliders mean identity. */
export function buildTransform(s) {
    if (s.mode === "remove") {
        return { kind: "remove", params: {}, depth_source: depthSource(s) };
    }
    if (s.mode === "2d") {
        if (s.scale2d !== 1) {
            return {
                kind: "scale2d",
                params: { scale: [s.scale2d, s.scale2d], pivot: [s.pivotX, s.pivotY] },
                depth_source: depthSource(s),
            };
        }
        if (s.dx !== 0 || s.dy !== 0) {
            return {
                kind: "translate2d",
                params: { offset: [s.dx, s.dy] },
                depth_source: depthSource(s),
            };
        }
        return { kind: "identity", params: {}, depth_source: depthSource(s) };
    }
    // 3d
    if (s.scale3d !== 1) {
        return {
            kind: "scale3d",
            params: { scale: [s.scale3d, s.scale3d, s.scale3d] },
            depth_source: depthSource(s),
        };
    }
    if (s.angleDeg !== 0 || s.tx !== 0 || s.ty !== 0 || s.tz !== 0) {
        const axis = { x: [1, 0, 0], y: [0, 1, 0], z: [0, 0, 1] }[s.axis];
        return {
            kind: "rigid3d",
            params: {
                axis,
                angle_deg: s.angleDeg,
                translation: [s.tx, s.ty, s.tz],
            },
            depth_source: depthSource(s),
        };
    }
    return { kind: "identity", params: {}, depth_source: depthSource(s) };
}
/** Read a transform JSON back into slider state where possible (round-trip
 * for the kinds the panel produces). */
export function slidersFromTransform(t, base) {
    const s = { ...(base ?? DEFAULT_SLIDERS) };
    if (t.depth_source === "file") {
        s.depthSource = "file";
    }
    else if (typeof t.depth_source === "string" && t.depth_source.startsWith("constant:")) {
        s.depthSource = "constant";
        s.constantDepth = parseFloat(t.depth_source.split(":")[1]);
    }
    switch (t.kind) {
        case "remove":
            s.mode = "remove";
            break;
        case "translate2d": {
            s.mode = "2d";
            const [dx, dy] = t.params.offset ?? [0, 0];
            s.dx = dx;
            s.dy = dy;
            break;
        }
        case "scale2d": {
            s.mode = "2d";
            const [sx] = t.params.scale ?? [1];
            const [px, py] = t.params.pivot ?? [0, 0];
            s.scale2d = sx;
            s.pivotX = px;
            s.pivotY = py;
            break;
        }
        case "rigid3d": {
            s.mode = "3d";
            const axis = t.params.axis ?? [0, 0, 1];
            s.axis = axis[0] ? "x" : axis[1] ? "y" : "z";
            s.angleDeg = t.params.angle_deg ?? 0;
            const [tx, ty, tz] = t.params.translation ?? [0, 0, 0];
            s.tx = tx;
            s.ty = ty;
            s.tz = tz;
            break;
        }
        case "scale3d": {
            s.mode = "3d";
            const [sx] = t.params.scale ?? [1];
            s.scale3d = sx;
            break;
        }
        case "identity":
            break;
    }
    return s;
}
