/**
 * Single-page judging flow.
 *
 * Stage one shows only the unperturbed image with the four answers. Voting
 * choice 1 ("this is an image of the label") posts the stage-one vote and,
 * once the server acknowledges it, reveals the perturbed image with its own
 * answer buttons; any other choice posts and advances to the next pair. The
 * perturbed pane is never in the DOM before that acknowledgement. Keys 1-4
 * mirror the numbered buttons for the stage currently awaiting a vote.
 */
import { ApiClient } from "./api.js";
import {
  CHOICE_LABELS,
  Choice,
  STAGE_PERTURBED,
  STAGE_UNPERTURBED,
  Stage,
  Task,
} from "./schema.js";
import { openSearch } from "./search.js";

export interface AppOptions {
  judge: string;
  client: ApiClient;
  root: HTMLElement;
  /** Injection point for window.open, overridable in tests. */
  opener?: Pick<Window, "open">;
}

type Phase =
  | { kind: "loading" }
  | { kind: "task"; task: Task; revealed: boolean }
  | { kind: "done" }
  | { kind: "error"; message: string; retry: () => Promise<void> };

export class LabelingApp {
  private readonly judge: string;
  private readonly client: ApiClient;
  private readonly root: HTMLElement;
  private readonly opener: Pick<Window, "open"> | undefined;
  private phase: Phase = { kind: "loading" };
  private submitting = false;

  constructor(options: AppOptions) {
    this.judge = options.judge;
    this.client = options.client;
    this.root = options.root;
    this.opener = options.opener;
    this.root.ownerDocument.addEventListener("keydown", (event) =>
      this.onKeydown(event),
    );
  }

  async start(): Promise<void> {
    await this.loadNextTask();
  }

  /** The stage whose buttons are currently live, if any. */
  activeStage(): Stage | null {
    if (this.phase.kind !== "task" || this.submitting) {
      return null;
    }
    return this.phase.revealed ? STAGE_PERTURBED : this.phase.task.stage;
  }

  private async loadNextTask(): Promise<void> {
    this.phase = { kind: "loading" };
    this.render();
    try {
      const task = await this.client.nextTask(this.judge);
      this.phase = task === null ? { kind: "done" } : { kind: "task", task, revealed: false };
    } catch (err) {
      this.phase = {
        kind: "error",
        message: `Could not fetch the next task: ${String(err)}`,
        retry: () => this.loadNextTask(),
      };
    }
    this.render();
  }

  async vote(choice: Choice): Promise<void> {
    if (this.phase.kind !== "task" || this.submitting) {
      return;
    }
    const { task, revealed } = this.phase;
    const stage: Stage = revealed ? STAGE_PERTURBED : task.stage;
    this.submitting = true;
    this.render();
    try {
      await this.client.submitVote({
        judge: this.judge,
        image_id: task.image_id,
        stage,
        choice,
      });
    } catch (err) {
      // the vote is not lost: retry re-submits the same choice
      this.submitting = false;
      this.phase = {
        kind: "error",
        message: `Vote not saved: ${String(err)}`,
        retry: async () => {
          this.phase = { kind: "task", task, revealed };
          this.render();
          await this.vote(choice);
        },
      };
      this.render();
      return;
    }
    this.submitting = false;
    if (stage === STAGE_UNPERTURBED && choice === 1) {
      this.phase = { kind: "task", task, revealed: true };
      this.render();
    } else {
      await this.loadNextTask();
    }
  }

  private onKeydown(event: KeyboardEvent): void {
    if (!["1", "2", "3", "4"].includes(event.key)) {
      return;
    }
    const stage = this.activeStage();
    if (stage === null) {
      return;
    }
    event.preventDefault();
    void this.vote(Number(event.key) as Choice);
  }

  private render(): void {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";
    switch (this.phase.kind) {
      case "loading":
        this.root.appendChild(el(doc, "p", { id: "status" }, "Loading..."));
        return;
      case "done":
        this.root.appendChild(
          el(doc, "p", { id: "status" }, "All images are judged. Thank you!"),
        );
        return;
      case "error": {
        const banner = el(doc, "div", { id: "banner", class: "banner" });
        banner.appendChild(el(doc, "span", {}, this.phase.message));
        const retry = el(doc, "button", { id: "retry" }, "Retry") as HTMLButtonElement;
        const retryFn = this.phase.retry;
        retry.addEventListener("click", () => void retryFn());
        banner.appendChild(retry);
        this.root.appendChild(banner);
        return;
      }
      case "task":
        this.renderTask(this.phase.task, this.phase.revealed);
    }
  }

  private renderTask(task: Task, revealed: boolean): void {
    const doc = this.root.ownerDocument;
    const header = el(doc, "p", { id: "prompt" });
    header.appendChild(el(doc, "span", {}, "Label: "));
    header.appendChild(el(doc, "strong", { id: "label-name" }, task.label_name));
    this.root.appendChild(header);

    const panes = el(doc, "div", { class: "panes" });
    this.root.appendChild(panes);

    const startedPerturbed = task.stage === STAGE_PERTURBED;
    const unpertUrl = startedPerturbed
      ? this.client.resolve(task.pair_url)
      : this.client.resolve(task.image_url);
    const pertUrl = startedPerturbed
      ? this.client.resolve(task.image_url)
      : this.client.resolve(task.pair_url);

    const unpertVotable = !revealed && !startedPerturbed;
    panes.appendChild(
      this.pane(STAGE_UNPERTURBED, "Unperturbed image", unpertUrl, unpertVotable),
    );
    // the perturbed pane exists only after the judge keeps the original
    // (or when the server resumes the pair at the perturbed stage)
    if (revealed || startedPerturbed) {
      panes.appendChild(
        this.pane(STAGE_PERTURBED, "Perturbed image", pertUrl, true),
      );
    }

    const searchBtn = el(
      doc,
      "button",
      { id: "search", class: "search" },
      "Open a web image search for this label",
    ) as HTMLButtonElement;
    searchBtn.addEventListener("click", () => {
      openSearch(task.label_name, this.opener ?? this.root.ownerDocument.defaultView ?? window);
    });
    this.root.appendChild(searchBtn);
  }

  private pane(stage: Stage, title: string, imageUrl: string, votable: boolean): HTMLElement {
    const doc = this.root.ownerDocument;
    const pane = el(doc, "section", { id: `pane-${stage}`, class: "pane" });
    pane.appendChild(el(doc, "h2", {}, title));
    pane.appendChild(el(doc, "img", { src: imageUrl, alt: title }));
    if (!votable) {
      pane.appendChild(el(doc, "p", { class: "voted" }, "Voted"));
      return pane;
    }
    const list = el(doc, "div", { class: "choices" });
    for (const { choice, text } of CHOICE_LABELS) {
      const button = el(
        doc,
        "button",
        { "data-stage": stage, "data-choice": String(choice), class: "choice" },
        `${choice}. ${text}`,
      ) as HTMLButtonElement;
      button.disabled = this.submitting;
      button.addEventListener("click", () => void this.vote(choice));
      list.appendChild(button);
    }
    pane.appendChild(list);
    return pane;
  }
}

function el(
  doc: Document,
  tag: string,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElement {
  const node = doc.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}
