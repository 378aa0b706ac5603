import * as path from "node:path";

import { ExportSession } from "./session.js";

/** Deterministic 32-bit PRNG (mulberry32); good enough for mock outputs. */
export function mulberry32(seed: number): () => number {
    let state = seed >>> 0;
    return () => {
        state = (state + 0x6d2b79f5) >>> 0;
        let t = state;
        t = Math.imul(t ^ (t >>> 15), t | 1);
        t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
        return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
    };
}

export interface StubOptions {
    outputDir: string;
    images?: number;
    seed?: number;
}

export const STUB_VOCABULARY = ["plane", "bird", "glider"];
const EMBEDDING_DIM = 8;

/**
 * Emit a deterministic mock detector output: per image a few ground-truth
 * objects, one matched detection each, and background detections. Exercises
 * the optional detector_score field on every other record.
 */
export function exportStub(options: StubOptions) {
    const images = options.images ?? 12;
    const rand = mulberry32(options.seed ?? 1234);
    const session = new ExportSession({
        vocabulary: STUB_VOCABULARY,
        detectionsPath: path.join(options.outputDir, "detections.jsonl"),
        groundTruthPath: path.join(options.outputDir, "ground_truth.jsonl"),
        vocabularyPath: path.join(options.outputDir, "vocabulary.txt"),
    });

    const uniform = (lo: number, hi: number) => lo + (hi - lo) * rand();
    const logitsFor = (hot: number, high: number) =>
        STUB_VOCABULARY.map((_, i) => (i === hot ? high : uniform(-4, -1)));
    const embedding = () => Array.from({ length: EMBEDDING_DIM }, () => uniform(-3, 3));

    let emitted = 0;
    for (let img = 0; img < images; img++) {
        const imageId = `stub_${String(img).padStart(4, "0")}`;
        const objects = 1 + Math.floor(rand() * 3);
        for (let obj = 0; obj < objects; obj++) {
            const x = uniform(0, 500);
            const y = uniform(0, 500);
            const w = uniform(20, 80);
            const h = uniform(20, 80);
            const classIndex = Math.floor(rand() * STUB_VOCABULARY.length);
            const className =
                rand() < 0.15 ? "novel_object" : STUB_VOCABULARY[classIndex];
            session.emitGroundTruth(imageId, [x, y, x + w, y + h], className);
            const jitter = uniform(-2, 2);
            const score = uniform(0.4, 0.99);
            session.emitDetection(
                imageId,
                [x + jitter, y + jitter, x + w + jitter, y + h + jitter],
                logitsFor(classIndex, uniform(1, 4)),
                embedding(),
                emitted % 2 === 0 ? score : undefined,
            );
            emitted += 1;
        }
        // background clutter without ground truth
        const bx = uniform(600, 900);
        const by = uniform(600, 900);
        session.emitDetection(
            imageId,
            [bx, by, bx + uniform(10, 40), by + uniform(10, 40)],
            logitsFor(Math.floor(rand() * STUB_VOCABULARY.length), uniform(-1.2, 0.5)),
            embedding(),
        );
    }
    const summary = session.summary();
    session.close();
    return summary;
}
