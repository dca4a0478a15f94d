// Deterministic class colors: golden-angle hue walk keeps any number of
// classes visually apart without a config knob.

const GOLDEN_ANGLE = 137.508;

export function classColor(classId: number): string {
  const hue = (classId * GOLDEN_ANGLE) % 360;
  return `hsl(${hue.toFixed(1)}, 65%, 46%)`;
}
