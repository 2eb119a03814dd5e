/** Web image search for a class label the judge may not recognise. */
export function imageSearchUrl(labelName: string): string {
  const query = encodeURIComponent(labelName);
  return `https://www.google.com/search?tbm=isch&q=${query}`;
}

export function openSearch(labelName: string, win: Pick<Window, "open"> = window): void {
  win.open(imageSearchUrl(labelName), "_blank", "noopener");
}
