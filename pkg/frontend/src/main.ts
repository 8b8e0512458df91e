/**
 * Wiring: stream -> panel -> SVG, clicks -> confirm dialog -> command POST.
 */

import { CommandController, PostFn } from "./commands.js";
import { svgMarkup } from "./diagram.js";
import { buildPanel } from "./panel.js";
import { StreamClient } from "./stream.js";

const post: PostFn = async (path, body) => {
  const res = await fetch(path, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(body),
  });
  return { status: res.status, body: await res.json().catch(() => ({})) };
};

const commands = new CommandController(post);

const diagramHost = document.getElementById("diagram") as HTMLElement;
const banner = document.getElementById("banner") as HTMLElement;
const toast = document.getElementById("toast") as HTMLElement;
const dialog = document.getElementById("confirm") as HTMLElement;
const dialogText = document.getElementById("confirm-text") as HTMLElement;
const openBtn = document.getElementById("confirm-open") as HTMLButtonElement;
const closeBtn = document.getElementById("confirm-close") as HTMLButtonElement;
const cancelBtn = document.getElementById("confirm-cancel") as HTMLButtonElement;

let dialogRtu: string | null = null;
let toastTimer: ReturnType<typeof setTimeout> | null = null;

function showToast(text: string, bad: boolean): void {
  toast.textContent = text;
  toast.className = bad ? "toast error show" : "toast show";
  if (toastTimer !== null) {
    clearTimeout(toastTimer);
  }
  toastTimer = setTimeout(() => { toast.className = "toast"; }, 4000);
}

function repaint(): void {
  diagramHost.innerHTML = svgMarkup(buildPanel(stream.snapshot), stream.connected);
}

const stream = new StreamClient(
  () => new WebSocket(`ws://${location.host}/api/stream`),
  {
    onSnapshot: () => repaint(),
    onCommandResult: (ev) => {
      if (ev.status !== "confirmed") {
        showToast(`${ev.rtu} ${ev.action}: ${ev.status}` +
          (ev.reason ? ` (${ev.reason})` : ""), true);
      }
    },
    onConnection: (connected) => {
      banner.className = connected ? "banner" : "banner show";
      repaint();
    },
  },
);

function hideDialog(): void {
  dialog.className = "dialog";
  dialogRtu = null;
}

async function confirmed(action: "open" | "close"): Promise<void> {
  const rtu = dialogRtu;
  hideDialog();
  if (rtu === null) {
    return;
  }
  const outcome = await commands.send(rtu, action);
  if (outcome.status === "confirmed") {
    showToast(`${rtu} ${action}: confirmed`, false);
  } else {
    showToast(`${rtu} ${action}: ${outcome.status}` +
      (outcome.reason ? ` (${outcome.reason})` : ""), true);
  }
}

diagramHost.addEventListener("click", (ev) => {
  const target = ev.target as Element | null;
  const rtu = target?.getAttribute?.("data-rtu");
  if (!rtu || commands.busy) {
    return;
  }
  dialogRtu = rtu;
  dialogText.textContent = `Switch ${rtu}:`;
  dialog.className = "dialog show";
});

openBtn.addEventListener("click", () => void confirmed("open"));
closeBtn.addEventListener("click", () => void confirmed("close"));
cancelBtn.addEventListener("click", hideDialog);

repaint();
stream.start();
