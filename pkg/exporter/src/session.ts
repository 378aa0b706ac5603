import * as fs from "node:fs";
import * as path from "node:path";

import { SchemaError, checkBox } from "./format.js";

export interface SessionOptions {
    vocabulary: string[];
    detectionsPath: string;
    groundTruthPath: string;
    vocabularyPath: string;
    /** strict (default) rejects non-finite values; otherwise they are
     * warned about and the record is skipped so emitted files always parse */
    strict?: boolean;
    warn?: (message: string) => void;
}

function assertFiniteVector(values: number[], name: string): string | null {
    for (let i = 0; i < values.length; i++) {
        if (typeof values[i] !== "number" || !Number.isFinite(values[i])) {
            return `field '${name}[${i}]' contains a non-finite value`;
        }
    }
    return null;
}

/**
 * Accumulates detector outputs for one dataset and writes the interchange
 * files. One vocabulary per session; logit and embedding dimensions are
 * locked by the first record and drift is rejected.
 */
export class ExportSession {
    private readonly options: SessionOptions;
    private readonly detectionLines: string[] = [];
    private readonly groundTruthLines: string[] = [];
    private readonly perImage = new Map<string, { detections: number; groundTruth: number }>();
    private logitLength: number | null = null;
    private embeddingLength: number | null = null;
    private closed = false;

    constructor(options: SessionOptions) {
        if (options.vocabulary.length === 0) {
            throw new SchemaError("vocabulary is empty");
        }
        if (new Set(options.vocabulary).size !== options.vocabulary.length) {
            throw new SchemaError("vocabulary contains duplicate class names");
        }
        this.options = { strict: true, ...options };
    }

    private image(imageId: string) {
        let entry = this.perImage.get(imageId);
        if (entry === undefined) {
            entry = { detections: 0, groundTruth: 0 };
            this.perImage.set(imageId, entry);
        }
        return entry;
    }

    private reject(message: string): null {
        if (this.options.strict) {
            throw new SchemaError(message);
        }
        (this.options.warn ?? ((m) => console.warn(m)))(`skipping record: ${message}`);
        return null;
    }

    /** Append one detection; returns the serialized line, or null when a
     * non-finite value was skipped in warn mode. */
    emitDetection(
        imageId: string,
        box: number[],
        classLogits: number[],
        embedding: number[],
        detectorScore?: number,
    ): string | null {
        if (this.closed) {
            throw new SchemaError("session is closed");
        }
        if (typeof imageId !== "string" || imageId.length === 0) {
            throw new SchemaError("field 'image_id' must be a non-empty string");
        }
        if (classLogits.length !== this.options.vocabulary.length) {
            throw new SchemaError(
                `field 'class_logits' has length ${classLogits.length} but the vocabulary ` +
                `defines ${this.options.vocabulary.length} classes`,
            );
        }
        if (this.logitLength === null) {
            this.logitLength = classLogits.length;
            this.embeddingLength = embedding.length;
        } else {
            if (classLogits.length !== this.logitLength) {
                throw new SchemaError(
                    `dimension drift: class_logits length ${classLogits.length} != ${this.logitLength}`,
                );
            }
            if (embedding.length !== this.embeddingLength) {
                throw new SchemaError(
                    `dimension drift: embedding length ${embedding.length} != ${this.embeddingLength}`,
                );
            }
        }
        const boxProblem = checkBox(box);
        if (boxProblem !== null) {
            throw new SchemaError(boxProblem);
        }
        for (const [values, name] of [
            [classLogits, "class_logits"],
            [embedding, "embedding"],
        ] as const) {
            const problem = assertFiniteVector(values, name);
            if (problem !== null) {
                return this.reject(problem);
            }
        }
        const record: Record<string, unknown> = {
            image_id: imageId,
            box,
            class_logits: classLogits,
            embedding,
        };
        if (detectorScore !== undefined) {
            if (!Number.isFinite(detectorScore)) {
                return this.reject("field 'detector_score' contains a non-finite value");
            }
            if (detectorScore < 0 || detectorScore > 1) {
                throw new SchemaError(`field 'detector_score' must lie in [0, 1], got ${detectorScore}`);
            }
            record.detector_score = detectorScore;
        }
        const line = JSON.stringify(record);
        this.detectionLines.push(line);
        this.image(imageId).detections += 1;
        return line;
    }

    emitGroundTruth(imageId: string, box: number[], className: string): string {
        if (this.closed) {
            throw new SchemaError("session is closed");
        }
        if (typeof imageId !== "string" || imageId.length === 0) {
            throw new SchemaError("field 'image_id' must be a non-empty string");
        }
        if (typeof className !== "string" || className.length === 0) {
            throw new SchemaError("field 'class_name' must be a non-empty string");
        }
        const boxProblem = checkBox(box);
        if (boxProblem !== null) {
            throw new SchemaError(boxProblem);
        }
        const line = JSON.stringify({ image_id: imageId, box, class_name: className });
        this.groundTruthLines.push(line);
        this.image(imageId).groundTruth += 1;
        return line;
    }

    summary() {
        return {
            images: this.perImage.size,
            detections: this.detectionLines.length,
            groundTruth: this.groundTruthLines.length,
        };
    }

    /** Write all three interchange files. */
    close() {
        if (this.closed) {
            return;
        }
        this.closed = true;
        for (const target of [
            this.options.detectionsPath,
            this.options.groundTruthPath,
            this.options.vocabularyPath,
        ]) {
            fs.mkdirSync(path.dirname(path.resolve(target)), { recursive: true });
        }
        const newline = (lines: string[]) => (lines.length > 0 ? lines.join("\n") + "\n" : "");
        fs.writeFileSync(this.options.detectionsPath, newline(this.detectionLines));
        fs.writeFileSync(this.options.groundTruthPath, newline(this.groundTruthLines));
        fs.writeFileSync(this.options.vocabularyPath, newline(this.options.vocabulary));
    }
}
