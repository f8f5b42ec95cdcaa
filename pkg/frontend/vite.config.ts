import { defineConfig } from "vitest/config";

export default defineConfig({
  server: {
    proxy: {
      "/frames": "http://127.0.0.1:8741",
      "/sessions": "http://127.0.0.1:8741",
    },
  },
  test: {
    environment: "jsdom",
    setupFiles: ["tests/setup.ts"],
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
