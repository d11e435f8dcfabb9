// Entry point: connect to the same-origin service, render the stream, and
// forward keyboard/mouse input as control messages.

import { ServiceClient } from "./client.js";
import { InputMapper } from "./input.js";
import { SceneRenderer } from "./renderer.js";

function wsUrl(): string {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/ws`;
}

function start(): void {
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const renderer = new SceneRenderer(ctx);
  const client = new ServiceClient(wsUrl());
  let input = new InputMapper(0);

  client.onHello = (hello) => {
    input = new InputMapper(hello.n_ctrl, 0.01, hello.tick_rate);
    renderer.camera.distance = 1.5;
  };
  client.connect();

  const resize = () => {
    canvas.width = window.innerWidth;
    canvas.height = window.innerHeight;
  };
  window.addEventListener("resize", resize);
  resize();

  window.addEventListener("keydown", (ev) => {
    if (ev.key === "Tab") ev.preventDefault();
    const direct = input.handleKey(ev, renderer.camera);
    if (direct) client.send(direct);
  });

  let dragging = false;
  let orbiting = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (ev) => {
    lastX = ev.clientX;
    lastY = ev.clientY;
    if (ev.button === 0 && !ev.shiftKey) dragging = true;
    else orbiting = true;
    ev.preventDefault();
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
    orbiting = false;
  });
  window.addEventListener("mousemove", (ev) => {
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    lastX = ev.clientX;
    lastY = ev.clientY;
    if (dragging) {
      input.handleMouseDrag(dx, dy, renderer.camera.worldPerPixel(canvas.height),
                            renderer.camera, ev.altKey);
    } else if (orbiting) {
      renderer.camera.orbit(-dx * 0.008, dy * 0.008);
    }
  });
  canvas.addEventListener("wheel", (ev) => {
    renderer.camera.zoom(ev.deltaY > 0 ? 1.1 : 1 / 1.1);
    ev.preventDefault();
  });
  canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

  const frame = () => {
    for (const msg of input.flush(performance.now() / 1000)) client.send(msg);
    const { hello, latest, status, lastError } = client.state;
    if (hello && latest) {
      renderer.draw(hello, latest, input.selected);
      const flags = latest.paused ? " | paused" : "";
      renderer.banner(
        `${status} | frame ${latest.frame}${flags} | ${renderer.fps.toFixed(0)} fps | ` +
        `selected ${input.selected.map((i) => i + 1).join(",") || "none"} | ` +
        `arrows/WASD drag, Alt=depth, Tab/1-9 select, R reset, P pause, O resume` +
        (lastError ? ` | error: ${lastError}` : ""));
    } else {
      ctx.fillStyle = "#10141a";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      renderer.banner(status === "connected" ? "waiting for stream..." : status);
    }
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

start();
