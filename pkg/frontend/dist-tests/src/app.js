/** Browser bootstrap: hash routing, polling, and event wiring. */
import { ApiClient, sessionTokenStore } from "./api.js";
import { FormController } from "./forms.js";
import { DEFAULT_POLL_MS, makePoller } from "./poll.js";
import { renderLaunchForm, renderPendingSelections, renderRunDetail, renderRunsList, escapeHtml, } from "./render.js";
import { canCancel, projectRun } from "./runs.js";
const api = new ApiClient(window.location.origin, sessionTokenStore(window.sessionStorage));
let subject = null;
let poller = null;
let launchForm = null;
let launchFlowId = null;
let launchFlowTitle = "";
function el(id) {
    const node = document.getElementById(id);
    if (!node)
        throw new Error(`missing #${id}`);
    return node;
}
function setContent(html) {
    el("content").innerHTML = html;
}
function swapPoller(next) {
    poller?.stop();
    poller = next;
    poller?.start();
}
async function showRuns() {
    const status = el("filter-status").value || undefined;
    const tag = el("filter-tag").value || undefined;
    const label = el("filter-label").value || undefined;
    const { runs } = await api.listRuns({ status, tag, label });
    setContent(renderRunsList(runs));
}
async function showRunDetail(runId) {
    const doc = await api.getRun(runId);
    setContent(renderRunDetail(projectRun(doc), canCancel(doc, subject)));
}
async function showLaunch(flowId) {
    if (launchFlowId !== flowId || !launchForm) {
        const flow = await api.getFlow(flowId);
        launchForm = new FormController(flow.input_schema);
        launchFlowId = flowId;
        launchFlowTitle = flow.title;
    }
    setContent(renderLaunchForm(launchForm, launchFlowTitle));
}
async function showFlows() {
    const { flows } = await api.listFlows();
    if (flows.length === 0) {
        setContent(`<p class="empty">No flows are visible to you.</p>`);
        return;
    }
    setContent(`<ul class="flows">${flows.map((f) => `
    <li><a href="#launch/${escapeHtml(f.flow_id)}">${escapeHtml(f.title)}</a>
        <small>${escapeHtml(f.description ?? "")}</small></li>`).join("")}</ul>`);
}
async function showSelections() {
    const { pending } = await api.pendingSelections();
    setContent(renderPendingSelections(pending));
}
function route() {
    const hash = window.location.hash.slice(1) || "runs";
    el("filters").style.display = hash === "runs" ? "" : "none";
    if (!api.tokens.get()) {
        swapPoller(null);
        setContent(`<p class="empty">Sign in to see your runs.</p>`);
        return;
    }
    if (hash.startsWith("run/")) {
        const runId = hash.slice(4);
        swapPoller(makePoller(() => showRunDetail(runId), DEFAULT_POLL_MS));
    }
    else if (hash.startsWith("launch/")) {
        const flowId = hash.slice(7);
        swapPoller(null);
        void showLaunch(flowId);
    }
    else if (hash === "flows") {
        swapPoller(makePoller(showFlows, DEFAULT_POLL_MS));
    }
    else if (hash === "selections") {
        swapPoller(makePoller(showSelections, DEFAULT_POLL_MS));
    }
    else {
        swapPoller(makePoller(showRuns, DEFAULT_POLL_MS));
    }
}
async function handleLogin(event) {
    event.preventDefault();
    const username = el("login-user").value;
    const secret = el("login-secret").value;
    try {
        await api.login(username, secret);
        const me = await api.whoami();
        subject = me.sub;
        el("login-state").textContent = `signed in as ${me.username ?? me.sub}`;
        route();
    }
    catch (err) {
        el("login-state").textContent = `sign-in failed: ${err.message}`;
    }
}
function handleContentClick(event) {
    const target = event.target;
    const action = target.dataset["action"];
    if (action === "cancel" && target.dataset["runId"]) {
        const runId = target.dataset["runId"];
        target.setAttribute("disabled", "");
        target.textContent = "Canceling…"; // optimistic; the next poll reconciles
        void api.cancelRun(runId).catch(() => undefined).then(() => poller?.tick());
    }
    else if (action === "respond" && target.dataset["actionId"]) {
        const selection = JSON.parse(target.dataset["selection"] ?? "null");
        void api.respondSelection(target.dataset["actionId"], selection)
            .then(() => poller?.tick())
            .catch((err) => { el("login-state").textContent = err.message; });
    }
}
function handleContentInput(event) {
    const target = event.target;
    if (!launchForm)
        return;
    if (target.dataset["field"]) {
        if (target.type === "checkbox") {
            launchForm.setField(target.dataset["field"], target.checked);
        }
        else if (target.tagName === "SELECT") {
            launchForm.setFieldText(target.dataset["field"], target.value ? String(JSON.parse(target.value)) : "");
        }
        else {
            launchForm.setFieldText(target.dataset["field"], target.value);
        }
    }
    else if (target.dataset["option"] === "label") {
        launchForm.label = target.value;
    }
    else if (target.dataset["option"] === "tags") {
        launchForm.tagsText = target.value;
    }
    // Re-render only the submit gate; a full re-render would steal focus.
    const button = document.querySelector("form.launch button[type=submit]");
    if (button) {
        if (launchForm.isSubmittable())
            button.removeAttribute("disabled");
        else
            button.setAttribute("disabled", "");
    }
}
async function handleSubmit(event) {
    const form = event.target;
    if (form.dataset["action"] !== "launch" || !launchForm || !launchFlowId)
        return;
    event.preventDefault();
    if (!launchForm.isSubmittable())
        return;
    const started = await api.startRun(launchFlowId, launchForm.buildInput(), {
        label: launchForm.label || undefined,
        tags: launchForm.tags(),
    });
    launchForm = null;
    window.location.hash = `#run/${started.run_id}`;
}
export function boot() {
    el("login-form").addEventListener("submit", (e) => { void handleLogin(e); });
    el("content").addEventListener("click", handleContentClick);
    el("content").addEventListener("input", handleContentInput);
    el("content").addEventListener("submit", (e) => { void handleSubmit(e); });
    el("filters").addEventListener("input", () => poller?.tick());
    window.addEventListener("hashchange", route);
    route();
}
boot();
