/**
 * Interchange file schema: line-delimited JSON records, one per line.
 *
 * Detection line keys (exact, no extras): image_id, box, class_logits,
 * embedding, optional detector_score. Ground-truth line keys: image_id,
 * box, class_name. Vocabulary: one class name per line, order significant.
 *
 * The checks here mirror the consuming toolkit's parser rule for rule so
 * that both sides accept and reject exactly the same files.
 */

export const DETECTION_REQUIRED = ["image_id", "box", "class_logits", "embedding"] as const;
export const DETECTION_ALLOWED = new Set([...DETECTION_REQUIRED, "detector_score"]);
export const GROUND_TRUTH_REQUIRED = ["image_id", "box", "class_name"] as const;
export const GROUND_TRUTH_ALLOWED = new Set(GROUND_TRUTH_REQUIRED);

export interface Violation {
    file: string;
    line: number;
    message: string;
}

export class SchemaError extends Error {}

function isFiniteNumber(value: unknown): value is number {
    return typeof value === "number" && Number.isFinite(value);
}

function checkVector(value: unknown, name: string): string | null {
    if (!Array.isArray(value) || value.length === 0) {
        return `field '${name}' must be a non-empty array of numbers`;
    }
    for (let i = 0; i < value.length; i++) {
        if (typeof value[i] !== "number") {
            return `field '${name}[${i}]' must be a number`;
        }
        if (!Number.isFinite(value[i])) {
            return `field '${name}[${i}]' contains a non-finite value`;
        }
    }
    return null;
}

export function checkBox(value: unknown): string | null {
    const vectorProblem = checkVector(value, "box");
    if (vectorProblem !== null) {
        return vectorProblem;
    }
    const box = value as number[];
    if (box.length !== 4) {
        return `field 'box' must have exactly 4 entries, got ${box.length}`;
    }
    if (!(box[0] < box[2]) || !(box[1] < box[3])) {
        return `degenerate box: requires x_min < x_max and y_min < y_max (got [${box.join(", ")}])`;
    }
    return null;
}

function parseObject(line: string): Record<string, unknown> | string {
    let parsed: unknown;
    try {
        parsed = JSON.parse(line);
    } catch (err) {
        return `malformed JSON record (${(err as Error).message})`;
    }
    if (parsed === null || typeof parsed !== "object" || Array.isArray(parsed)) {
        return "record must be a JSON object";
    }
    return parsed as Record<string, unknown>;
}

function checkKeys(
    obj: Record<string, unknown>,
    required: readonly string[],
    allowed: Set<string>,
): string | null {
    for (const key of required) {
        if (!(key in obj)) {
            return `missing required field '${key}'`;
        }
    }
    for (const key of Object.keys(obj)) {
        if (!allowed.has(key)) {
            return `unknown field '${key}'`;
        }
    }
    return null;
}

export interface DetectionDims {
    logits: number;
    embedding: number;
}

/** Validate one detection line; returns its dimensions or an error string. */
export function checkDetectionLine(line: string): DetectionDims | string {
    const obj = parseObject(line);
    if (typeof obj === "string") {
        return obj;
    }
    const keyProblem = checkKeys(obj, DETECTION_REQUIRED, DETECTION_ALLOWED);
    if (keyProblem !== null) {
        return keyProblem;
    }
    if (typeof obj.image_id !== "string" || obj.image_id.length === 0) {
        return "field 'image_id' must be a non-empty string";
    }
    const boxProblem = checkBox(obj.box);
    if (boxProblem !== null) {
        return boxProblem;
    }
    for (const name of ["class_logits", "embedding"] as const) {
        const problem = checkVector(obj[name], name);
        if (problem !== null) {
            return problem;
        }
    }
    const score = obj.detector_score;
    if (score !== undefined && score !== null) {
        if (!isFiniteNumber(score)) {
            return "field 'detector_score' must be a finite number";
        }
        if (score < 0 || score > 1) {
            return `field 'detector_score' must lie in [0, 1], got ${score}`;
        }
    }
    return {
        logits: (obj.class_logits as number[]).length,
        embedding: (obj.embedding as number[]).length,
    };
}

export function checkGroundTruthLine(line: string): string | null {
    const obj = parseObject(line);
    if (typeof obj === "string") {
        return obj;
    }
    const keyProblem = checkKeys(obj, GROUND_TRUTH_REQUIRED, GROUND_TRUTH_ALLOWED);
    if (keyProblem !== null) {
        return keyProblem;
    }
    if (typeof obj.image_id !== "string" || obj.image_id.length === 0) {
        return "field 'image_id' must be a non-empty string";
    }
    if (typeof obj.class_name !== "string" || obj.class_name.length === 0) {
        return "field 'class_name' must be a non-empty string";
    }
    return checkBox(obj.box);
}

/** Validate vocabulary file content; returns class names or violations. */
export function checkVocabulary(content: string, file: string): string[] | Violation[] {
    const violations: Violation[] = [];
    const names: string[] = [];
    const seen = new Set<string>();
    const lines = content.split("\n");
    // a single trailing newline is the normal file shape
    if (lines.length > 0 && lines[lines.length - 1] === "") {
        lines.pop();
    }
    lines.forEach((raw, i) => {
        const name = raw.trim();
        if (name.length === 0) {
            violations.push({ file, line: i + 1, message: "empty class name in vocabulary" });
            return;
        }
        if (seen.has(name)) {
            violations.push({
                file,
                line: i + 1,
                message: `duplicate class name in vocabulary: '${name}'`,
            });
            return;
        }
        seen.add(name);
        names.push(name);
    });
    if (names.length === 0 && violations.length === 0) {
        violations.push({ file, line: 1, message: "vocabulary is empty" });
    }
    return violations.length > 0 ? violations : names;
}
