/**
 * Typed client over the editing service's HTTP/JSON endpoints.  Every
 * server interaction of the app goes through here.
 */
export class ApiError extends Error {
    constructor(status, message) {
        super(message);
        this.status = status;
    }
}
export class Api {
    constructor(base = "") {
        this.base = base;
    }
    async call(path, init) {
        const resp = await fetch(this.base + path, {
            headers: { "Content-Type": "application/json" },
            ...init,
        });
        if (!resp.ok) {
            let detail = resp.statusText;
            try {
                const body = await resp.json();
                detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body);
            }
            catch {
                /* non-JSON error body */
            }
            throw new ApiError(resp.status, detail);
        }
        return (await resp.json());
    }
    createSession(imageB64, maskB64, depthB64, steps) {
        return this.call("/sessions", {
            method: "POST",
            body: JSON.stringify({
                image: imageB64,
                mask: maskB64,
                depth: depthB64,
                steps,
            }),
        });
    }
    sessionState(id) {
        return this.call(`/sessions/${id}`);
    }
    preview(id, transform) {
        return this.call(`/sessions/${id}/preview`, {
            method: "POST",
            body: JSON.stringify({ transform }),
        });
    }
    submitEdit(id, config) {
        return this.call(`/sessions/${id}/edits`, {
            method: "POST",
            body: JSON.stringify({ config }),
        });
    }
    jobState(jobId) {
        return this.call(`/jobs/${jobId}`);
    }
    jobResult(jobId) {
        return this.call(`/jobs/${jobId}/result`);
    }
    attentionUrl(jobId, step, block) {
        return `${this.base}/jobs/${jobId}/attention/${step}/${block}`;
    }
}
