#!/usr/bin/env node
/**
 * Exporter command line. Exit codes: 0 success, 1 usage, 2 invalid data.
 *
 *   osdfusion-export export-stub --output-dir DIR [--images N] [--seed S]
 *   osdfusion-export validate --detections F --ground-truth F --vocabulary F
 */

import { exportStub } from "./stub.js";
import { validateFiles } from "./validate.js";

function parseFlags(argv: string[], spec: Record<string, boolean>): Record<string, string> {
    const out: Record<string, string> = {};
    for (let i = 0; i < argv.length; i += 2) {
        const flag = argv[i];
        if (!(flag in spec)) {
            throw new UsageError(`unknown flag ${flag}`);
        }
        const value = argv[i + 1];
        if (value === undefined) {
            throw new UsageError(`flag ${flag} needs a value`);
        }
        out[flag.replace(/^--/, "")] = value;
    }
    for (const [flag, required] of Object.entries(spec)) {
        if (required && !(flag.replace(/^--/, "") in out)) {
            throw new UsageError(`missing required flag ${flag}`);
        }
    }
    return out;
}

class UsageError extends Error {}

export function main(argv: string[]): number {
    const [command, ...rest] = argv;
    try {
        if (command === "export-stub") {
            const flags = parseFlags(rest, {
                "--output-dir": true,
                "--images": false,
                "--seed": false,
            });
            const summary = exportStub({
                outputDir: flags["output-dir"],
                images: flags.images === undefined ? undefined : Number(flags.images),
                seed: flags.seed === undefined ? undefined : Number(flags.seed),
            });
            console.log(JSON.stringify(summary));
            return 0;
        }
        if (command === "validate") {
            const flags = parseFlags(rest, {
                "--detections": true,
                "--ground-truth": true,
                "--vocabulary": true,
            });
            const violations = validateFiles(
                flags.detections,
                flags["ground-truth"],
                flags.vocabulary,
            );
            for (const v of violations) {
                console.error(`${v.file}:${v.line}: ${v.message}`);
            }
            console.log(JSON.stringify({ violations: violations.length }));
            return violations.length === 0 ? 0 : 2;
        }
        console.error(
            "usage: osdfusion-export <export-stub|validate> [flags]\n" +
            "  export-stub --output-dir DIR [--images N] [--seed S]\n" +
            "  validate --detections F --ground-truth F --vocabulary F",
        );
        return 1;
    } catch (err) {
        if (err instanceof UsageError) {
            console.error(`error: ${err.message}`);
            return 1;
        }
        console.error(`error: ${(err as Error).message}`);
        return 2;
    }
}

if (process.argv[1] && /cli\.(ts|js)$/.test(process.argv[1])) {
    process.exit(main(process.argv.slice(2)));
}
