/**
 * Schema-driven launch forms.
 *
 * A flow's input schema (the properties / required / type / enum / default
 * slice) turns into one field per property with a type-appropriate widget.
 * Validation here mirrors what the server enforces, so the form can block
 * submission before a request is ever made; the server remains the
 * authority.
 */
export function deriveFormModel(schema) {
    const node = (schema ?? {});
    const properties = node.properties ?? {};
    const required = new Set(node.required ?? []);
    const fields = [];
    for (const [name, sub] of Object.entries(properties)) {
        fields.push({
            name,
            widget: widgetFor(sub),
            type: sub.type ?? null,
            required: required.has(name),
            title: sub.title ?? name,
            description: sub.description,
            enumValues: sub.enum,
            defaultValue: sub.default,
        });
    }
    return { fields };
}
function widgetFor(sub) {
    if (sub.enum)
        return "select";
    switch (sub.type) {
        case "integer":
        case "number":
            return "number";
        case "boolean":
            return "checkbox";
        case "object":
        case "array":
            return "json";
        case "string":
        default:
            return "text";
    }
}
function typeOk(type, value) {
    switch (type) {
        case "string":
            return typeof value === "string";
        case "integer":
            return typeof value === "number" && Number.isInteger(value);
        case "number":
            return typeof value === "number" && Number.isFinite(value);
        case "boolean":
            return typeof value === "boolean";
        case "object":
            return typeof value === "object" && value !== null && !Array.isArray(value);
        case "array":
            return Array.isArray(value);
        default:
            return true;
    }
}
function sameValue(a, b) {
    return JSON.stringify(a) === JSON.stringify(b);
}
export function validateValues(model, values) {
    const violations = [];
    for (const field of model.fields) {
        const present = field.name in values && values[field.name] !== undefined;
        if (!present) {
            if (field.required) {
                violations.push({ field: field.name, message: "required" });
            }
            continue;
        }
        const value = values[field.name];
        if (field.type && !typeOk(field.type, value)) {
            violations.push({ field: field.name, message: `expected ${field.type}` });
            continue;
        }
        if (field.enumValues && !field.enumValues.some((v) => sameValue(v, value))) {
            violations.push({ field: field.name, message: "not one of the allowed values" });
        }
    }
    return violations;
}
/**
 * Holds the state of one launch form: field values (defaults prefilled),
 * run label/tags, and the submit gate. Submission is refused while any
 * required field is missing or any value is invalid.
 */
export class FormController {
    constructor(schema) {
        this.values = {};
        this.label = "";
        this.tagsText = "";
        this.model = deriveFormModel(schema);
        for (const field of this.model.fields) {
            if (field.defaultValue !== undefined) {
                this.values[field.name] = JSON.parse(JSON.stringify(field.defaultValue));
            }
        }
    }
    get fieldValues() {
        return { ...this.values };
    }
    setField(name, value) {
        if (value === undefined)
            delete this.values[name];
        else
            this.values[name] = value;
    }
    /** Parse a raw widget string into the field's value type. */
    setFieldText(name, text) {
        const field = this.model.fields.find((f) => f.name === name);
        if (!field)
            return;
        if (text === "") {
            this.setField(name, undefined);
            return;
        }
        switch (field.widget) {
            case "number": {
                const n = Number(text);
                this.setField(name, Number.isNaN(n) ? text : n);
                break;
            }
            case "json": {
                try {
                    this.setField(name, JSON.parse(text));
                }
                catch {
                    this.setField(name, text); // invalid JSON shows up as a type violation
                }
                break;
            }
            default:
                this.setField(name, text);
        }
    }
    violations() {
        return validateValues(this.model, this.values);
    }
    isSubmittable() {
        return this.violations().length === 0;
    }
    tags() {
        return this.tagsText.split(",").map((t) => t.trim()).filter((t) => t.length > 0);
    }
    /** The input document a submission sends; refuses while invalid. */
    buildInput() {
        const violations = this.violations();
        if (violations.length > 0) {
            throw new Error(`form is not submittable: ${violations
                .map((v) => `${v.field}: ${v.message}`).join("; ")}`);
        }
        return { ...this.values };
    }
}
