/**
 * HTML renderers. Pure string-in/string-out so they are testable without a
 * browser; the app binds the results into the document and wires events by
 * data attributes.
 */
export function escapeHtml(text) {
    return String(text ?? "")
        .replaceAll("&", "&amp;")
        .replaceAll("<", "&lt;")
        .replaceAll(">", "&gt;")
        .replaceAll('"', "&quot;")
        .replaceAll("'", "&#39;");
}
const STATUS_CLASS = {
    ACTIVE: "status-active",
    SUCCEEDED: "status-succeeded",
    FAILED: "status-failed",
    CANCELED: "status-canceled",
    INACTIVE: "status-inactive",
};
export function renderRunsList(runs) {
    if (runs.length === 0) {
        return `<p class="empty">No runs yet. Runs you can view or manage appear here.</p>`;
    }
    const rows = runs.map((run) => `
    <tr data-run-id="${escapeHtml(run.run_id)}">
      <td><a href="#run/${escapeHtml(run.run_id)}">${escapeHtml(run.label ?? run.run_id.slice(0, 8))}</a></td>
      <td class="${STATUS_CLASS[run.status] ?? ""}">${escapeHtml(run.status)}</td>
      <td>${escapeHtml(run.current_state ?? "")}</td>
      <td>${run.tags.map((t) => `<span class="tag">${escapeHtml(t)}</span>`).join(" ")}</td>
      <td>${escapeHtml(run.created)}</td>
      <td>${escapeHtml(run.updated)}</td>
    </tr>`).join("");
    return `
    <table class="runs">
      <thead><tr><th>Run</th><th>Status</th><th>State</th><th>Tags</th>
        <th>Started</th><th>Updated</th></tr></thead>
      <tbody>${rows}</tbody>
    </table>`;
}
export function renderRunDetail(view, cancellable) {
    const failed = view.failedState
        ? `<div class="failure">Failed in <strong class="state-failed">${escapeHtml(view.failedState)}</strong>
         <pre>${escapeHtml(JSON.stringify(view.failureDetail, null, 2))}</pre></div>`
        : "";
    const inactive = view.inactiveReason
        ? `<div class="failure">Inactive: ${escapeHtml(view.inactiveReason)}</div>` : "";
    const cancel = cancellable
        ? `<button data-action="cancel" data-run-id="${escapeHtml(view.runId)}">Cancel run</button>`
        : "";
    const timings = view.timings.map((t) => `
    <tr><td>${escapeHtml(t.state)}</td><td>${escapeHtml(t.entered)}</td>
    <td>${escapeHtml(t.exited ?? "…")}</td>
    <td>${t.seconds === null ? "…" : escapeHtml(t.seconds) + " s"}</td></tr>`).join("");
    // Event log, most recent first: time / code / state / description.
    const events = view.eventsNewestFirst.map((e) => `
    <tr class="${e.kind === "RunFailed" || e.kind === "ActionFailed" ? "event-failed" : ""}">
      <td>${escapeHtml(e.ts)}</td><td>${escapeHtml(e.kind)}</td>
      <td>${escapeHtml(e.state ?? "")}</td>
      <td><code>${escapeHtml(JSON.stringify(e.detail))}</code></td>
    </tr>`).join("");
    return `
    <section class="run-detail" data-run-id="${escapeHtml(view.runId)}">
      <h2>${escapeHtml(view.label ?? view.runId)}</h2>
      <p>Status: <strong class="${STATUS_CLASS[view.status] ?? ""}">${escapeHtml(view.status)}</strong>
         ${view.currentState ? `at ${escapeHtml(view.currentState)}` : ""} ${cancel}</p>
      ${failed}${inactive}
      <h3>State timings</h3>
      <table class="timings"><thead><tr><th>State</th><th>Entered</th><th>Exited</th>
        <th>Duration</th></tr></thead><tbody>${timings}</tbody></table>
      <h3>Event log</h3>
      <table class="events"><thead><tr><th>Time</th><th>Code</th><th>State</th>
        <th>Description</th></tr></thead><tbody>${events}</tbody></table>
    </section>`;
}
export function renderLaunchForm(form, flowTitle) {
    const values = form.fieldValues;
    const violations = new Map(form.violations().map((v) => [v.field, v.message]));
    const fields = form.model.fields.map((field) => {
        const value = values[field.name];
        const mark = field.required ? `<span class="required" title="required">*</span>` : "";
        const problem = violations.has(field.name)
            ? `<span class="violation">${escapeHtml(violations.get(field.name))}</span>` : "";
        let widget;
        switch (field.widget) {
            case "select": {
                const options = (field.enumValues ?? []).map((v) => {
                    const selected = JSON.stringify(v) === JSON.stringify(value) ? " selected" : "";
                    return `<option value="${escapeHtml(JSON.stringify(v))}"${selected}>${escapeHtml(v)}</option>`;
                }).join("");
                widget = `<select data-field="${escapeHtml(field.name)}">
          <option value=""${value === undefined ? " selected" : ""}>(choose)</option>${options}</select>`;
                break;
            }
            case "checkbox":
                widget = `<input type="checkbox" data-field="${escapeHtml(field.name)}"${value === true ? " checked" : ""}>`;
                break;
            case "number":
                widget = `<input type="number" data-field="${escapeHtml(field.name)}" value="${value === undefined ? "" : escapeHtml(value)}">`;
                break;
            case "json":
                widget = `<textarea data-field="${escapeHtml(field.name)}" rows="3">${value === undefined ? "" : escapeHtml(JSON.stringify(value, null, 1))}</textarea>`;
                break;
            default:
                widget = `<input type="text" data-field="${escapeHtml(field.name)}" value="${value === undefined ? "" : escapeHtml(value)}">`;
        }
        return `
      <label class="field">
        <span class="field-title">${escapeHtml(field.title)}${mark}</span>
        ${widget}
        ${field.description ? `<small>${escapeHtml(field.description)}</small>` : ""}
        ${problem}
      </label>`;
    }).join("");
    const disabled = form.isSubmittable() ? "" : " disabled";
    return `
    <form class="launch" data-action="launch">
      <h2>Start ${escapeHtml(flowTitle)}</h2>
      ${fields}
      <label class="field"><span class="field-title">Label (optional)</span>
        <input type="text" data-option="label" value="${escapeHtml(form.label)}"></label>
      <label class="field"><span class="field-title">Tags (optional, comma separated)</span>
        <input type="text" data-option="tags" value="${escapeHtml(form.tagsText)}"></label>
      <button type="submit"${disabled}>Start run</button>
    </form>`;
}
export function renderPendingSelections(pending) {
    if (pending.length === 0) {
        return `<p class="empty">Nothing is waiting for your input.</p>`;
    }
    const cards = pending.map((item) => {
        const options = item.body.options.map((option) => `
      <button data-action="respond" data-action-id="${escapeHtml(item.action_id)}"
              data-selection="${escapeHtml(JSON.stringify(option))}">${escapeHtml(option)}</button>`).join(" ");
        return `
      <div class="selection" data-action-id="${escapeHtml(item.action_id)}">
        <p>${escapeHtml(item.body.prompt ?? "A flow is waiting for your decision.")}</p>
        <p class="meta">requested ${escapeHtml(item.start_time)}</p>
        ${options}
      </div>`;
    }).join("");
    return `<section class="selections">${cards}</section>`;
}
