/** Latest-wins dispatch plus a trailing-edge debounce.
 *
 * Every dispatched promise gets a sequence number; a result is applied only
 * if nothing newer was dispatched while it was in flight, so stale frames
 * can never overwrite fresh ones regardless of network reordering.
 */

export interface LatestWins<T> {
  dispatch: (fired: Promise<T>) => Promise<void>;
  invalidate: () => void;
  inFlight: () => number;
}

export function createLatestWins<T>(
  apply: (value: T) => void,
  onError?: (err: unknown) => void,
): LatestWins<T> {
  let lastId = 0;
  let pending = 0;

  return {
    dispatch: async (fired) => {
      const thisId = ++lastId;
      pending++;
      try {
        const value = await fired;
        if (thisId === lastId) apply(value);
      } catch (err) {
        if (thisId === lastId && onError) onError(err);
      } finally {
        pending--;
      }
    },
    invalidate: () => {
      lastId++;
    },
    inFlight: () => pending,
  };
}

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  cancel: () => void;
  flush: () => void;
}

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  ms: number,
): Debounced<A> {
  let handle: ReturnType<typeof setTimeout> | undefined;
  let lastArgs: A | undefined;

  const call = (...args: A) => {
    lastArgs = args;
    if (handle !== undefined) clearTimeout(handle);
    handle = setTimeout(() => {
      handle = undefined;
      fn(...(lastArgs as A));
    }, ms);
  };
  call.cancel = () => {
    if (handle !== undefined) clearTimeout(handle);
    handle = undefined;
  };
  call.flush = () => {
    if (handle === undefined) return;
    clearTimeout(handle);
    handle = undefined;
    fn(...(lastArgs as A));
  };
  return call;
}
