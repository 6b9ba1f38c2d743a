import { MetricsDoc } from "./api";

// Confusion-matrix heatmap and one-vs-rest ROC curves. Display only:
// every number shown is taken verbatim from the metrics response.

export function renderMetricsEmpty(root: HTMLElement, participant: string): void {
  root.replaceChildren();
  const empty = document.createElement("p");
  empty.className = "metrics-empty";
  empty.textContent = `No model for ${participant} yet — train first.`;
  root.append(empty);
}

export function renderMetrics(root: HTMLElement, doc: MetricsDoc): void {
  root.replaceChildren();

  const summary = document.createElement("p");
  summary.className = "metrics-summary";
  summary.textContent =
    `held-out accuracy ${doc.accuracy.toFixed(4)}` +
    ` · train accuracy ${doc.train_accuracy.toFixed(4)}`;
  root.append(summary);

  root.append(confusionHeatmap(doc.confusion, doc.labels));
  root.append(aucBadges(doc.auc, doc.labels));
  const curves = rocSvg(doc.roc, doc.labels);
  if (curves) root.append(curves);
}

function confusionHeatmap(confusion: number[][], labels: string[]): HTMLTableElement {
  const max = Math.max(1, ...confusion.flat());
  const table = document.createElement("table");
  table.className = "confusion";
  const header = table.insertRow();
  header.insertCell().textContent = "actual \\ predicted";
  for (const label of labels) {
    const cell = header.insertCell();
    cell.textContent = label;
  }
  confusion.forEach((row, i) => {
    const tr = table.insertRow();
    tr.insertCell().textContent = labels[i];
    for (const value of row) {
      const cell = tr.insertCell();
      cell.className = "confusion-cell";
      cell.textContent = String(value);
      const heat = value / max;
      cell.style.backgroundColor = `rgba(38, 99, 235, ${(0.08 + 0.8 * heat).toFixed(3)})`;
      if (heat > 0.5) cell.style.color = "white";
    }
  });
  return table;
}

function aucBadges(auc: (number | null)[], labels: string[]): HTMLElement {
  const wrap = document.createElement("div");
  wrap.className = "auc-badges";
  auc.forEach((value, i) => {
    const badge = document.createElement("span");
    badge.className = "auc-badge";
    badge.textContent =
      value == null ? `${labels[i]} AUC n/a` : `${labels[i]} AUC ${value.toFixed(4)}`;
    wrap.append(badge);
  });
  return wrap;
}

const CURVE_COLORS = ["#dc2626", "#16a34a", "#2563eb"];

function rocSvg(roc: ([number, number][] | null)[], labels: string[]): SVGSVGElement | null {
  if (!roc.some((curve) => curve && curve.length)) return null;
  const ns = "http://www.w3.org/2000/svg";
  const size = 220;
  const pad = 24;
  const svg = document.createElementNS(ns, "svg");
  svg.setAttribute("viewBox", `0 0 ${size} ${size}`);
  svg.setAttribute("class", "roc");

  const scale = (v: number) => pad + v * (size - 2 * pad);
  const flip = (v: number) => size - scale(v);

  const axes = document.createElementNS(ns, "path");
  axes.setAttribute(
    "d",
    `M ${scale(0)} ${flip(1)} L ${scale(0)} ${flip(0)} L ${scale(1)} ${flip(0)}`,
  );
  axes.setAttribute("class", "roc-axes");
  svg.append(axes);

  const diag = document.createElementNS(ns, "line");
  diag.setAttribute("x1", String(scale(0)));
  diag.setAttribute("y1", String(flip(0)));
  diag.setAttribute("x2", String(scale(1)));
  diag.setAttribute("y2", String(flip(1)));
  diag.setAttribute("class", "roc-chance");
  svg.append(diag);

  roc.forEach((curve, i) => {
    if (!curve || !curve.length) return;
    const line = document.createElementNS(ns, "polyline");
    line.setAttribute(
      "points",
      curve.map(([fpr, tpr]) => `${scale(fpr)},${flip(tpr)}`).join(" "),
    );
    line.setAttribute("class", `roc-curve roc-${labels[i]?.toLowerCase() ?? i}`);
    line.setAttribute("stroke", CURVE_COLORS[i % CURVE_COLORS.length]);
    line.setAttribute("fill", "none");
    svg.append(line);
  });
  return svg;
}
