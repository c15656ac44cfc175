import { defineConfig } from 'vite';

export default defineConfig({
  // the bundle is mounted at /ui by the API server, so all asset
  // references must stay relative
  base: './',
  build: { outDir: 'dist' },
  server: {
    proxy: {
      '/meta': 'http://127.0.0.1:8080',
      '/health': 'http://127.0.0.1:8080',
      '/predict': 'http://127.0.0.1:8080',
      '/whatif': 'http://127.0.0.1:8080',
      '/navigate': 'http://127.0.0.1:8080',
      '/regimes': 'http://127.0.0.1:8080'
    }
  }
});
