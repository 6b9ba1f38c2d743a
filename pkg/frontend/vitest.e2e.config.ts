import { defineConfig } from "vite";

// Live-loop tests against a running service (see src/e2e/live.test.ts).
export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["src/e2e/**/*.test.ts"],
  },
});
