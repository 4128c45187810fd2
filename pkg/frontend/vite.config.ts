/// <reference types="vitest/config" />
import { defineConfig } from "vite";
import react from "@vitejs/plugin-react";

// The dev server proxies API routes to a locally running trial-conduct
// service (`python3 -m beboin.api`); override the target with BEBOIN_API_URL.
const apiTarget = process.env.BEBOIN_API_URL ?? "http://127.0.0.1:8008";

export default defineConfig({
  plugins: [react()],
  server: {
    proxy: {
      "/trials": apiTarget,
      "/decision-table": apiTarget,
      "/simulations": apiTarget,
    },
  },
  test: {
    environment: "jsdom",
    globals: true,
    setupFiles: ["tests/setup.ts"],
    // Each test file boots its own API server process; run them one at a
    // time so a single-CPU host is not oversubscribed.
    fileParallelism: false,
    testTimeout: 120_000,
    hookTimeout: 180_000,
  },
});
