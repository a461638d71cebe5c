// Dependency-free SVG map: nodes plotted on a local equirectangular
// projection with a light grid. Marker color comes exclusively from the
// view model (which mirrors the server's /map states).

import type { NodePanel, ViewModel } from "./viewModel.js";

const SVG_NS = "http://www.w3.org/2000/svg";

interface Projection {
  x(lon: number): number;
  y(lat: number): number;
}

function fitProjection(panels: NodePanel[], width: number, height: number): Projection {
  const lats = panels.map((p) => p.latDeg);
  const lons = panels.map((p) => p.lonDeg);
  const pad = 0.15;
  let minLat = Math.min(...lats), maxLat = Math.max(...lats);
  let minLon = Math.min(...lons), maxLon = Math.max(...lons);
  if (!panels.length || minLat === maxLat) { minLat -= 0.01; maxLat += 0.01; }
  if (!panels.length || minLon === maxLon) { minLon -= 0.01; maxLon += 0.01; }
  const latSpan = (maxLat - minLat) * (1 + 2 * pad);
  const lonSpan = (maxLon - minLon) * (1 + 2 * pad);
  const lat0 = minLat - (maxLat - minLat) * pad;
  const lon0 = minLon - (maxLon - minLon) * pad;
  return {
    x: (lon) => ((lon - lon0) / lonSpan) * width,
    y: (lat) => height - ((lat - lat0) / latSpan) * height,
  };
}

export function renderMap(vm: ViewModel, svg: SVGSVGElement): void {
  const width = 640;
  const height = 420;
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.replaceChildren();

  const panels = [...vm.nodes.values()];
  const proj = fitProjection(panels, width, height);

  for (let i = 1; i < 8; i++) {
    const grid = document.createElementNS(SVG_NS, "line");
    grid.setAttribute("x1", String((width / 8) * i));
    grid.setAttribute("x2", String((width / 8) * i));
    grid.setAttribute("y1", "0");
    grid.setAttribute("y2", String(height));
    grid.setAttribute("class", "map-grid");
    svg.appendChild(grid);
    const gridH = document.createElementNS(SVG_NS, "line");
    gridH.setAttribute("y1", String((height / 6) * Math.min(i, 5)));
    gridH.setAttribute("y2", String((height / 6) * Math.min(i, 5)));
    gridH.setAttribute("x1", "0");
    gridH.setAttribute("x2", String(width));
    gridH.setAttribute("class", "map-grid");
    svg.appendChild(gridH);
  }

  for (const panel of panels) {
    const cx = proj.x(panel.lonDeg);
    const cy = proj.y(panel.latDeg);
    const marker = document.createElementNS(SVG_NS, "circle");
    marker.setAttribute("cx", String(cx));
    marker.setAttribute("cy", String(cy));
    marker.setAttribute("r", panel.color === "RED" ? "9" : "6");
    marker.setAttribute("class", `marker marker-${panel.color.toLowerCase()}`);
    marker.setAttribute("data-node", panel.nodeId);
    const tip = document.createElementNS(SVG_NS, "title");
    tip.textContent =
      `${panel.nodeId}\n` +
      `fill ${panel.garbageLevelCm?.toFixed(1) ?? "?"} cm, ` +
      `flow ${panel.flowLpm?.toFixed(2) ?? "?"} L/min, ` +
      `gas ${panel.gasPpm?.toFixed(1) ?? "?"} ppm`;
    marker.appendChild(tip);
    svg.appendChild(marker);

    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String(cx + 11));
    label.setAttribute("y", String(cy + 4));
    label.setAttribute("class", "marker-label");
    label.textContent = panel.nodeId.slice(-4);
    svg.appendChild(label);
  }
}
