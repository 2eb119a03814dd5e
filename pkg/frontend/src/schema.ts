/**
 * Wire types for the labeling service API, validated with zod so a drifting
 * backend fails loudly instead of rendering garbage.
 */
import { z } from "zod";

export const STAGE_UNPERTURBED = "unperturbed";
export const STAGE_PERTURBED = "perturbed";

export const StageSchema = z.enum([STAGE_UNPERTURBED, STAGE_PERTURBED]);
export type Stage = z.infer<typeof StageSchema>;

export const ChoiceSchema = z.number().int().min(1).max(4);
export type Choice = z.infer<typeof ChoiceSchema>;

/** GET /api/task response (non-null case). */
export const TaskSchema = z.object({
  image_id: z.number().int().nonnegative(),
  stage: StageSchema,
  label_name: z.string().min(1),
  image_url: z.string().min(1),
  pair_url: z.string().min(1),
});
export type Task = z.infer<typeof TaskSchema>;

/** POST /api/vote request body. */
export const VoteBodySchema = z.object({
  judge: z.string().min(1),
  image_id: z.number().int().nonnegative(),
  stage: StageSchema,
  choice: ChoiceSchema,
});
export type VoteBody = z.infer<typeof VoteBodySchema>;

/** POST /api/vote response. */
export const VoteAckSchema = z.object({
  accepted: z.boolean(),
  duplicate: z.boolean(),
});
export type VoteAck = z.infer<typeof VoteAckSchema>;

export const DispositionSchema = z.object({
  image_id: z.number().int().nonnegative(),
  outcome: z.enum(["unpert_rejected", "success", "class_changed"]),
  unperturbed_tally: z.record(z.number().int()),
  perturbed_tally: z.record(z.number().int()),
});
export type Disposition = z.infer<typeof DispositionSchema>;

/** The four answers, in button order; captions carry the numeric shortcut. */
export const CHOICE_LABELS: ReadonlyArray<{ choice: Choice; text: string }> = [
  { choice: 1, text: "This is an image of the label" },
  { choice: 2, text: "This is an image of something else" },
  { choice: 3, text: "It is unclear what this image shows" },
  { choice: 4, text: "This is not an image of anything meaningful" },
];
