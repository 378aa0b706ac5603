import * as fs from "node:fs";

import {
    Violation,
    checkDetectionLine,
    checkGroundTruthLine,
    checkVocabulary,
} from "./format.js";

function nonEmptyLines(content: string): Array<{ line: number; text: string }> {
    const out: Array<{ line: number; text: string }> = [];
    content.split("\n").forEach((raw, i) => {
        const text = raw.trim();
        if (text.length > 0) {
            out.push({ line: i + 1, text });
        }
    });
    return out;
}

/**
 * Standalone schema validator over the three interchange files. An empty
 * report means the consuming toolkit's own parser (and its matcher, which
 * checks the logit/vocabulary alignment) accepts the files.
 */
export function validateFiles(
    detectionsPath: string,
    groundTruthPath: string,
    vocabularyPath: string,
): Violation[] {
    const violations: Violation[] = [];

    const vocabResult = checkVocabulary(fs.readFileSync(vocabularyPath, "utf-8"), vocabularyPath);
    let vocabularySize: number | null = null;
    if (Array.isArray(vocabResult) && typeof vocabResult[0] === "string") {
        vocabularySize = (vocabResult as string[]).length;
    } else {
        violations.push(...(vocabResult as Violation[]));
    }

    let logitLength: number | null = null;
    let embeddingLength: number | null = null;
    for (const { line, text } of nonEmptyLines(fs.readFileSync(detectionsPath, "utf-8"))) {
        const result = checkDetectionLine(text);
        if (typeof result === "string") {
            violations.push({ file: detectionsPath, line, message: result });
            continue;
        }
        if (logitLength === null) {
            logitLength = result.logits;
            embeddingLength = result.embedding;
        } else {
            if (result.logits !== logitLength) {
                violations.push({
                    file: detectionsPath,
                    line,
                    message: `class_logits length ${result.logits} does not match first record (${logitLength})`,
                });
            }
            if (result.embedding !== embeddingLength) {
                violations.push({
                    file: detectionsPath,
                    line,
                    message: `embedding length ${result.embedding} does not match first record (${embeddingLength})`,
                });
            }
        }
        if (vocabularySize !== null && result.logits !== vocabularySize) {
            violations.push({
                file: detectionsPath,
                line,
                message:
                    `class_logits length ${result.logits} does not match the vocabulary ` +
                    `(${vocabularySize} classes)`,
            });
        }
    }

    for (const { line, text } of nonEmptyLines(fs.readFileSync(groundTruthPath, "utf-8"))) {
        const problem = checkGroundTruthLine(text);
        if (problem !== null) {
            violations.push({ file: groundTruthPath, line, message: problem });
        }
    }

    return violations;
}
