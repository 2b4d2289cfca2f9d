import assert from "node:assert/strict";
import { test } from "node:test";
import { FormController, deriveFormModel, validateValues } from "../src/forms.js";
// The kind of schema a launch form is generated from: a payload, two ids,
// optional tags, and an optional label.
const LAUNCH_SCHEMA = {
    type: "object",
    properties: {
        payload: { type: "object", title: "Payload" },
        endpoint_compute: { type: "string", title: "Compute endpoint id" },
        validate_function_id: { type: "string", title: "Function id" },
        tags: { type: "array", title: "Tags" },
        label: { type: "string", title: "Label" },
    },
    required: ["payload", "endpoint_compute", "validate_function_id"],
};
test("one field per property with required markers", () => {
    const model = deriveFormModel(LAUNCH_SCHEMA);
    assert.deepEqual(model.fields.map((f) => f.name), ["payload", "endpoint_compute", "validate_function_id", "tags", "label"]);
    assert.deepEqual(model.fields.filter((f) => f.required).map((f) => f.name), ["payload", "endpoint_compute", "validate_function_id"]);
});
test("widget mapping is type-appropriate", () => {
    const model = deriveFormModel({
        type: "object",
        properties: {
            s: { type: "string" },
            n: { type: "number" },
            i: { type: "integer" },
            b: { type: "boolean" },
            o: { type: "object" },
            a: { type: "array" },
            choice: { type: "string", enum: ["alpha", "beta"] },
        },
    });
    const widgets = Object.fromEntries(model.fields.map((f) => [f.name, f.widget]));
    assert.deepEqual(widgets, {
        s: "text", n: "number", i: "number", b: "checkbox",
        o: "json", a: "json", choice: "select",
    });
});
test("form generation is schema-driven only: same schema, same model", () => {
    const a = deriveFormModel(JSON.parse(JSON.stringify(LAUNCH_SCHEMA)));
    const b = deriveFormModel(JSON.parse(JSON.stringify(LAUNCH_SCHEMA)));
    assert.deepEqual(a, b);
});
test("defaults are prefilled into the controller", () => {
    const controller = new FormController({
        type: "object",
        properties: {
            retries: { type: "integer", default: 3 },
            mode: { type: "string", enum: ["fast", "careful"], default: "careful" },
        },
    });
    assert.deepEqual(controller.fieldValues, { retries: 3, mode: "careful" });
    assert.equal(controller.isSubmittable(), true);
});
test("submission blocked until every required field is filled", () => {
    const controller = new FormController(LAUNCH_SCHEMA);
    assert.equal(controller.isSubmittable(), false);
    assert.throws(() => controller.buildInput(), /not submittable/);
    controller.setFieldText("payload", '{"sample": 1}');
    controller.setFieldText("endpoint_compute", "ep-7");
    assert.equal(controller.isSubmittable(), false);
    controller.setFieldText("validate_function_id", "fn-9");
    assert.equal(controller.isSubmittable(), true);
    assert.deepEqual(controller.buildInput(), {
        payload: { sample: 1 }, endpoint_compute: "ep-7", validate_function_id: "fn-9",
    });
});
test("validation mirrors the server's checks", () => {
    const model = deriveFormModel({
        type: "object",
        properties: {
            count: { type: "integer" },
            mode: { type: "string", enum: ["a", "b"] },
        },
        required: ["count"],
    });
    assert.deepEqual(validateValues(model, {}), [{ field: "count", message: "required" }]);
    assert.deepEqual(validateValues(model, { count: 1.5 }), [{ field: "count", message: "expected integer" }]);
    assert.deepEqual(validateValues(model, { count: 2, mode: "z" }), [{ field: "mode", message: "not one of the allowed values" }]);
    assert.deepEqual(validateValues(model, { count: 2, mode: "a" }), []);
});
test("clearing an optional field removes it from the input", () => {
    const controller = new FormController({
        type: "object",
        properties: { note: { type: "string" } },
    });
    controller.setFieldText("note", "hello");
    assert.deepEqual(controller.buildInput(), { note: "hello" });
    controller.setFieldText("note", "");
    assert.deepEqual(controller.buildInput(), {});
});
test("bad JSON in an object field is a violation, not a crash", () => {
    const controller = new FormController({
        type: "object",
        properties: { payload: { type: "object" } },
        required: ["payload"],
    });
    controller.setFieldText("payload", "{not json");
    assert.equal(controller.isSubmittable(), false);
    controller.setFieldText("payload", "{}");
    assert.equal(controller.isSubmittable(), true);
});
test("tags parse from comma-separated text", () => {
    const controller = new FormController({});
    controller.tagsText = " beamline, nightly ,";
    assert.deepEqual(controller.tags(), ["beamline", "nightly"]);
});
